#include "drl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "drl/error.hpp"

namespace drl {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof v);
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
  void doubles(std::span<const double> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    buf.insert(buf.end(), p, p + v.size() * sizeof(double));
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(std::uint64_t n) {
    if (n > (size_ - pos_) / sizeof(double)) throw CheckpointCorruptError("checkpoint: array length exceeds payload");
    std::vector<double> v(n);
    std::memcpy(v.data(), data_ + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) throw CheckpointCorruptError("checkpoint: record runs past the payload");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'D', 'R', 'L', 'C'};
constexpr std::size_t kHeader = 4 + 2 + 8;

void write_param(Writer& w, const Param& p) {
  w.str(p.name());
  w.put<std::uint8_t>(p.frozen());
  w.put<std::uint8_t>(p.decays());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape().size()));
  for (std::size_t d : p.shape()) w.put<std::uint64_t>(d);
  w.doubles(p.value().values());
}

struct Header {
  std::uint16_t version;
  std::uint64_t payload;
};

// Validates magic, version, length and checksum; returns the payload span.
Header check_envelope(const std::vector<std::uint8_t>& bytes) {
  const std::size_t lead = std::min<std::size_t>(bytes.size(), 4);
  if (std::memcmp(bytes.data(), kMagic, lead) != 0 || bytes.empty())
    throw CheckpointMagicError("checkpoint: bad magic, not a DRLC file");
  if (lead < 4) throw CheckpointTruncatedError("checkpoint: truncated inside magic");
  if (bytes.size() < 6) throw CheckpointTruncatedError("checkpoint: truncated before version");
  Header h{};
  std::memcpy(&h.version, bytes.data() + 4, 2);
  if (h.version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint: unsupported format version " + std::to_string(h.version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < kHeader) throw CheckpointTruncatedError("checkpoint: truncated header");
  std::memcpy(&h.payload, bytes.data() + 6, 8);
  const std::size_t body = bytes.size() - kHeader;
  if (h.payload > body || body - h.payload < 8)
    throw CheckpointTruncatedError("checkpoint: file holds " + std::to_string(bytes.size()) +
                                   " bytes, header declares payload " + std::to_string(h.payload));
  if (body - h.payload > 8) throw CheckpointCorruptError("checkpoint: trailing bytes after checksum");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + kHeader + h.payload, 8);
  if (fnv1a(bytes.data() + kHeader, h.payload) != stored)
    throw CheckpointCorruptError("checkpoint: checksum mismatch");
  return h;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const IncrementalState& state,
                                            const PrototypeStore& store) {
  Writer p;
  p.put<std::uint64_t>(config_digest(config));
  p.str(to_json(config, -1));
  p.put<std::uint32_t>(static_cast<std::uint32_t>(state.stage_index));
  p.put<std::uint32_t>(static_cast<std::uint32_t>(state.class_registry.size()));
  for (const auto& [c, s] : state.class_registry) {
    p.put<std::int32_t>(c);
    p.put<std::int32_t>(s);
  }
  p.put<std::uint32_t>(static_cast<std::uint32_t>(state.streams.size()));
  for (const auto& m : state.streams) {
    p.put<std::int32_t>(m.stage);
    p.put<std::uint8_t>(static_cast<std::uint8_t>(m.options.fusion));
    p.put<std::uint8_t>(static_cast<std::uint8_t>(m.options.attention));
    p.put<std::uint8_t>(static_cast<std::uint8_t>(m.options.reuse));
    p.put<double>(m.options.gamma);
    p.put<std::uint32_t>(static_cast<std::uint32_t>(m.options.resolved_bottleneck(state.backbone.config.embed_dim)));
  }
  const ConstParamRefs params = state.frozen_params();
  p.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const Param* q : params) write_param(p, *q);
  p.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& [c, proto] : store.classes()) {
    p.put<std::int32_t>(c);
    p.put<std::int32_t>(proto.stage);
    p.put<std::uint32_t>(static_cast<std::uint32_t>(proto.segments.size()));
    for (std::size_t s = 0; s < proto.segments.size(); ++s) {
      p.put<std::uint8_t>(static_cast<std::uint8_t>(proto.provenance[s]));
      p.put<std::uint64_t>(proto.segments[s].size());
      p.doubles(proto.segments[s].values());
    }
  }

  Writer out;
  out.buf.insert(out.buf.end(), kMagic, kMagic + 4);
  out.put<std::uint16_t>(kCheckpointVersion);
  out.put<std::uint64_t>(p.buf.size());
  out.buf.insert(out.buf.end(), p.buf.begin(), p.buf.end());
  out.put<std::uint64_t>(fnv1a(p.buf.data(), p.buf.size()));
  return out.buf;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const Header h = check_envelope(bytes);
  Reader r(bytes.data() + kHeader, h.payload);

  const auto digest = r.get<std::uint64_t>();
  const std::string json = r.str();
  RunConfig config;
  try {
    config = config_from_json(json);
  } catch (const ConfigError& e) {
    throw CheckpointCorruptError(std::string("checkpoint: embedded config rejected: ") + e.what());
  }
  if (config_digest(config) != digest) throw CheckpointCorruptError("checkpoint: config digest mismatch");

  IncrementalState state;
  state.stage_index = static_cast<int>(r.get<std::uint32_t>());
  const auto n_registry = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_registry; ++i) {
    const int c = r.get<std::int32_t>();
    state.class_registry[c] = r.get<std::int32_t>();
  }

  state.backbone = Backbone::random_init(config.backbone, 0);
  const auto n_streams = r.get<std::uint32_t>();
  if (n_streams > 1u << 16) throw CheckpointCorruptError("checkpoint: implausible stream count");
  for (std::uint32_t i = 0; i < n_streams; ++i) {
    const int stage = r.get<std::int32_t>();
    StageOptions opt;
    const auto fusion = r.get<std::uint8_t>();
    const auto attention = r.get<std::uint8_t>();
    const auto reuse = r.get<std::uint8_t>();
    if (fusion > 3 || attention > 2 || reuse > 1) throw CheckpointCorruptError("checkpoint: bad stream options");
    opt.fusion = static_cast<FusionMode>(fusion);
    opt.attention = static_cast<AttentionMode>(attention);
    opt.reuse = static_cast<AttentionReuse>(reuse);
    opt.gamma = r.get<double>();
    opt.bottleneck = static_cast<int>(r.get<std::uint32_t>());
    try {
      state.streams.push_back(StageModule::create(config.backbone, opt, stage, 0));
    } catch (const ConfigError& e) {
      throw CheckpointCorruptError(std::string("checkpoint: stream options rejected: ") + e.what());
    }
  }

  std::map<std::string, Param*> by_name;
  for (Param* p : state.backbone.params()) by_name[p->name()] = p;
  for (auto& m : state.streams)
    for (Param* p : m.params()) by_name[p->name()] = p;
  const auto n_params = r.get<std::uint32_t>();
  if (n_params != by_name.size())
    throw CheckpointCorruptError("checkpoint: holds " + std::to_string(n_params) + " params, architecture has " +
                                 std::to_string(by_name.size()));
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = r.str();
    const bool frozen = r.get<std::uint8_t>() != 0;
    const bool decays = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 4) throw CheckpointCorruptError("checkpoint: bad rank for " + name);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint64_t>());
    auto it = by_name.find(name);
    if (it == by_name.end() || seen[name]) throw CheckpointCorruptError("checkpoint: unexpected param " + name);
    seen[name] = true;
    Param& p = *it->second;
    if (p.shape() != shape || p.decays() != decays) throw CheckpointCorruptError("checkpoint: shape mismatch for " + name);
    std::vector<double> v = r.doubles(p.numel());
    p.mutable_value() = Tensor(shape, std::move(v));
    p.set_frozen(frozen);
  }

  PrototypeStore store;
  const auto n_classes = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_classes; ++i) {
    const int c = r.get<std::int32_t>();
    const int stage = r.get<std::int32_t>();
    const auto segs = r.get<std::uint32_t>();
    if (segs > n_streams + 1) throw CheckpointCorruptError("checkpoint: too many prototype segments");
    for (std::uint32_t s = 0; s < segs; ++s) {
      const auto prov = r.get<std::uint8_t>();
      if (prov > 1) throw CheckpointCorruptError("checkpoint: bad provenance flag");
      const auto len = r.get<std::uint64_t>();
      if (len == 0) throw CheckpointCorruptError("checkpoint: empty prototype segment");
      std::vector<double> v = r.doubles(len);
      store.set_segment(c, stage, s, Tensor({len}, std::move(v)), static_cast<Provenance>(prov));
    }
  }
  if (r.remaining() != 0) throw CheckpointCorruptError("checkpoint: unparsed bytes in payload");
  return Checkpoint{std::move(config), std::move(state), std::move(store)};
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const IncrementalState& state,
                     const PrototypeStore& store) {
  const auto bytes = encode_checkpoint(config, state, store);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

CheckpointInfo inspect_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const Checkpoint ck = decode_checkpoint(bytes);
  CheckpointInfo info;
  info.version = kCheckpointVersion;
  info.config_digest = config_digest(ck.config);
  info.file_digest = fnv1a(bytes.data(), bytes.size());
  info.bytes = bytes.size();
  info.stage_index = ck.state.stage_index;
  info.streams = ck.state.num_streams();
  info.params = count_params(ck.state.frozen_params());
  info.prototype_classes = ck.store.size();
  info.config_json = to_json(ck.config);
  return info;
}

}  // namespace drl
