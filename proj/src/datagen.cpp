#include "drl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "drl/error.hpp"
#include "drl/rng.hpp"

namespace drl {

const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

void StreamSpec::validate() const {
  if (base_classes <= 0 || incremental_classes <= 0 || inc_n <= 0) {
    throw ConfigError("stream: class counts must be positive");
  }
  if (incremental_classes % inc_n != 0) {
    throw ConfigError("stream: incremental_classes (" + std::to_string(incremental_classes) +
                      ") is not divisible by inc_n (" + std::to_string(inc_n) + ")");
  }
  if (train_per_class <= 0 || test_per_class <= 0) throw ConfigError("stream: samples per class must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("stream: noise_sigma must be >= 0");
  if (image_side < 4) throw ConfigError("stream: image_side must be at least 4");
}

std::vector<std::vector<int>> split_b0_inc_n(const std::vector<int>& classes, int n) {
  if (n <= 0 || classes.empty() || classes.size() % static_cast<std::size_t>(n) != 0) {
    throw ConfigError("split_b0_inc_n: " + std::to_string(classes.size()) +
                      " classes cannot be split into stages of " + std::to_string(n));
  }
  std::vector<std::vector<int>> stages;
  for (std::size_t i = 0; i < classes.size(); i += static_cast<std::size_t>(n)) {
    stages.emplace_back(classes.begin() + static_cast<std::ptrdiff_t>(i),
                        classes.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(n)));
  }
  return stages;
}

Tensor class_template(int class_id, int side, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7E3000ULL + static_cast<std::uint64_t>(class_id)));
  const double s = static_cast<double>(side);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(1.0, 3.5);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = rng.uniform(0.12, 0.28);
  struct Blob {
    double cx, cy, sigma, amp;
  };
  const int n_blobs = rng.uniform_int(2, 3);
  std::vector<Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    blobs.push_back({rng.uniform(2.0, s - 2.0), rng.uniform(2.0, s - 2.0), rng.uniform(1.5, 3.0),
                     sign * rng.uniform(0.2, 0.4)});
  }
  Tensor img({static_cast<std::size_t>(side), static_cast<std::size_t>(side)});
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double u = (x * std::cos(theta) + y * std::sin(theta)) / s;
      double v = 0.5 + amp * std::sin(2.0 * std::numbers::pi * freq * u + phase);
      for (const auto& b : blobs) {
        const double r2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
        v += b.amp * std::exp(-r2 / (2.0 * b.sigma * b.sigma));
      }
      img(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = v;
    }
  return img;
}

std::uint64_t sample_id(int class_id, Split split, int index) {
  return (static_cast<std::uint64_t>(class_id + 1) << 32) |
         (static_cast<std::uint64_t>(split) << 24) | static_cast<std::uint64_t>(index);
}

Sample make_sample(int class_id, Split split, int index, const StreamSpec& spec) {
  const Tensor tpl = class_template(class_id, spec.image_side, spec.seed);
  const std::uint64_t id = sample_id(class_id, split, index);
  Rng rng(mix_seed(spec.seed, id));
  const int dx = rng.uniform_int(-2, 2);
  const int dy = rng.uniform_int(-2, 2);
  const int side = spec.image_side;
  Tensor img(tpl.shape());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int sy = ((y - dy) % side + side) % side;
      const int sx = ((x - dx) % side + side) % side;
      const double v = tpl(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) +
                       rng.normal(0.0, spec.noise_sigma);
      img(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = std::clamp(v, 0.0, 1.0);
    }
  return {id, class_id, split, std::move(img)};
}

namespace {

StageDataset build_stage(int stage, const std::vector<int>& classes, const StreamSpec& spec) {
  StageDataset ds;
  ds.stage = stage;
  ds.classes = classes;
  for (int c : classes) {
    for (int i = 0; i < spec.train_per_class; ++i) ds.train.push_back(make_sample(c, Split::train, i, spec));
    for (int i = 0; i < spec.test_per_class; ++i) ds.test.push_back(make_sample(c, Split::test, i, spec));
  }
  return ds;
}

}  // namespace

ClassStream generate_stream(const StreamSpec& spec) {
  spec.validate();
  ClassStream out;
  std::vector<int> base(static_cast<std::size_t>(spec.base_classes));
  for (int i = 0; i < spec.base_classes; ++i) base[static_cast<std::size_t>(i)] = i;
  out.base = build_stage(0, base, spec);

  std::vector<int> inc(static_cast<std::size_t>(spec.incremental_classes));
  for (int i = 0; i < spec.incremental_classes; ++i) inc[static_cast<std::size_t>(i)] = spec.base_classes + i;
  const auto parts = split_b0_inc_n(inc, spec.inc_n);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    out.stages.push_back(build_stage(static_cast<int>(s + 1), parts[s], spec));
  }
  return out;
}

std::string stream_manifest_csv(const ClassStream& stream) {
  std::ostringstream os;
  os << "class_id,stage,split,sample_count\n";
  auto emit = [&os](const StageDataset& ds) {
    for (int c : ds.classes) {
      for (Split split : {Split::train, Split::test}) {
        const auto& v = split == Split::train ? ds.train : ds.test;
        const auto n = std::count_if(v.begin(), v.end(), [c](const Sample& s) { return s.label == c; });
        os << c << ',' << ds.stage << ',' << to_string(split) << ',' << n << '\n';
      }
    }
  };
  emit(stream.base);
  for (const auto& st : stream.stages) emit(st);
  return os.str();
}

namespace {

// Next whitespace-separated header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.get();
    if (c == EOF) break;
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open PGM file " + path.string());
  if (pgm_token(in) != "P5") throw IoError(path.string() + ": not a binary (P5) PGM file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(pgm_token(in));
    h = std::stoi(pgm_token(in));
    maxval = std::stoi(pgm_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError(path.string() + ": bad PGM header values");
  const std::size_t bytes_per = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated PGM data");
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < img.size(); ++i) {
    const unsigned v = bytes_per == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
    img[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image, int maxval) {
  if (maxval <= 0 || maxval > 255) throw ConfigError("write_pgm: maxval must be in [1, 255]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write PGM file " + path.string());
  out << "P5\n" << image.cols() << ' ' << image.rows() << '\n' << maxval << '\n';
  for (double v : image.values()) {
    const auto b = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
    out.put(static_cast<char>(b));
  }
  if (!out) throw IoError("failed writing PGM file " + path.string());
}

ClassStream load_pgm_stream(const std::filesystem::path& root, const StreamSpec& spec) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("image folder not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());

  const int total = spec.base_classes + spec.incremental_classes;
  if (static_cast<int>(class_dirs.size()) != total) {
    throw ConfigError("image folder has " + std::to_string(class_dirs.size()) + " classes, spec expects " +
                      std::to_string(total));
  }
  spec.validate();

  auto load_class = [&](int class_id, StageDataset& ds) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[static_cast<std::size_t>(class_id)]))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw DegenerateInputError("class folder " + class_dirs[static_cast<std::size_t>(class_id)].string() + " needs at least two images");
    const double share = static_cast<double>(spec.test_per_class) / (spec.train_per_class + spec.test_per_class);
    const std::size_t n_test = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::floor(share * static_cast<double>(files.size()))), 1, files.size() - 1);
    const std::size_t n_train = files.size() - n_test;
    for (std::size_t i = 0; i < files.size(); ++i) {
      Tensor img = read_pgm(files[i]);
      if (img.rows() != static_cast<std::size_t>(spec.image_side) || img.cols() != static_cast<std::size_t>(spec.image_side)) {
        throw DimensionError(files[i].string() + ": expected " + std::to_string(spec.image_side) + "x" +
                             std::to_string(spec.image_side) + " image");
      }
      const Split split = i < n_train ? Split::train : Split::test;
      const int index = static_cast<int>(split == Split::train ? i : i - n_train);
      Sample s{sample_id(class_id, split, index), class_id, split, std::move(img)};
      (split == Split::train ? ds.train : ds.test).push_back(std::move(s));
    }
  };

  ClassStream out;
  out.base.stage = 0;
  for (int c = 0; c < spec.base_classes; ++c) {
    out.base.classes.push_back(c);
    load_class(c, out.base);
  }
  std::vector<int> inc;
  for (int c = spec.base_classes; c < total; ++c) inc.push_back(c);
  const auto parts = split_b0_inc_n(inc, spec.inc_n);
  for (std::size_t s = 0; s < parts.size(); ++s) {
    StageDataset ds;
    ds.stage = static_cast<int>(s + 1);
    ds.classes = parts[s];
    for (int c : parts[s]) load_class(c, ds);
    out.stages.push_back(std::move(ds));
  }
  return out;
}

}  // namespace drl
