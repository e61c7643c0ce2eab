#include "drl/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "drl/error.hpp"
#include "drl/gradcheck.hpp"
#include "drl/rng.hpp"

namespace drl {

namespace fs = std::filesystem;

namespace {

// Exclusive ownership of an output directory for the lifetime of a run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
      // the lock is held even if the pid note could not be written
    }
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

template <typename E>
bool rethrow_as(const Error& e, const std::string& msg) {
  if (dynamic_cast<const E*>(&e)) throw E(msg);
  return false;
}

[[noreturn]] void rethrow_with_stage(const Error& e, int stage) {
  const std::string msg = "stage " + std::to_string(stage) + ": " + e.what();
  rethrow_as<CheckpointMagicError>(e, msg) || rethrow_as<CheckpointVersionError>(e, msg) ||
      rethrow_as<CheckpointTruncatedError>(e, msg) || rethrow_as<CheckpointCorruptError>(e, msg) ||
      rethrow_as<DimensionError>(e, msg) || rethrow_as<DegenerateInputError>(e, msg) ||
      rethrow_as<ConfigError>(e, msg) || rethrow_as<ProtocolError>(e, msg) || rethrow_as<NumericError>(e, msg) ||
      rethrow_as<DeterminismError>(e, msg) || rethrow_as<IoError>(e, msg);
  throw Error(msg);
}

nlohmann::json report_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"l_pos", e.loss.l_pos},
                      {"l_neg", e.loss.l_neg},
                      {"l_base", e.loss.l_base},
                      {"l_kd", e.loss.l_kd},
                      {"total", e.loss.total}});
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, a] : r.per_class_train_accuracy) per_class[std::to_string(c)] = a;
  return {{"stage", r.stage},
          {"epochs", epochs},
          {"per_class_train_accuracy", per_class},
          {"train_accuracy", r.train_accuracy},
          {"wall_seconds", r.wall_seconds},
          {"trainable_params", r.trainable_params},
          {"frozen_params", r.frozen_params},
          {"frozen_hash_before", r.frozen_hash_before},
          {"frozen_hash_after", r.frozen_hash_after}};
}

std::string cache_key(const RunConfig& c) {
  nlohmann::json k = nlohmann::json::parse(to_json(c, -1));
  return nlohmann::json{{"backbone", k["backbone"]}, {"stream", k["stream"]}, {"pretrain", k["pretrain"]},
                        {"seed", c.seed}}
      .dump();
}

}  // namespace

const Backbone& BackboneCache::get(const RunConfig& config, const StageDataset& base) {
  const std::string key = cache_key(config);
  auto it = cache_.find(key);
  if (it != cache_.end()) return *it->second;
  PretrainResult r = pretrain_backbone(base, config.backbone, config.pretrain_config());
  return *cache_.emplace(key, std::make_unique<Backbone>(std::move(r.backbone))).first->second;
}

ClassStream make_stream(const RunConfig& config) {
  StreamSpec spec = config.stream;
  spec.seed = config.seed;
  if (!config.data_root.empty()) return load_pgm_stream(config.data_root, spec);
  return generate_stream(spec);
}

std::string summary_row(const RunConfig& config, const MetricsTable& metrics) {
  std::ostringstream os;
  os << to_string(config.method) << ',' << to_string(config.ipa.fusion) << ',' << to_string(config.ipa.attention)
     << ',' << to_string(config.loss.kind) << (config.loss.alpha > 0.0 ? "+kd" : "") << ',' << config.seed << ','
     << fixed4(metrics.a_bar()) << ',' << fixed4(metrics.a_last());
  return os.str();
}

ExperimentResult run_experiment(const RunConfig& config, const ExperimentOptions& options) {
  config.validate();
  ExperimentResult res;
  res.config = config;
  const fs::path out = config.output_dir;
  std::unique_ptr<DirLock> lock;
  if (options.write_artifacts) {
    fs::create_directories(out);
    lock = std::make_unique<DirLock>(out);
    write_text(out / "config.json", to_json(config) + "\n");
  }

  res.stream = make_stream(config);
  if (options.write_artifacts) write_text(out / "manifest.csv", stream_manifest_csv(res.stream));

  BackboneCache local;
  BackboneCache& cache = options.cache ? *options.cache : local;
  const Backbone& pretrained = cache.get(config, res.stream.base);
  const StageConfig stage_cfg = config.stage_config();
  const auto& stages = res.stream.stages;

  if (config.method == Method::finetune) {
    const FinetuneResult ft = run_finetune_baseline(pretrained, stages, stage_cfg);
    for (std::size_t t = 0; t < ft.accuracies.size(); ++t)
      res.metrics.stages.push_back(
          {static_cast<int>(t + 1), ft.seen_classes[t], ft.correct[t], ft.total[t], ft.accuracies[t]});
  } else {
    {
      // deep copy of the cached, frozen backbone
      Backbone copy = Backbone::random_init(config.backbone, 0);
      ConstParamRefs src = pretrained.params();
      ParamRefs dst = copy.params();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i]->mutable_value() = src[i]->value();
      freeze_all(dst);
      res.state = IncrementalState::from_backbone(std::move(copy));
    }
    for (std::size_t t = 0; t < stages.size(); ++t) {
      const int stage = static_cast<int>(t + 1);
      try {
        res.reports.push_back(run_stage(res.state, stages[t], stage_cfg));
        extract_prototypes(res.state, stages[t], res.store);
        const auto bytes = encode_checkpoint(config, res.state, res.store);
        res.checkpoint_digests.push_back(fnv1a(bytes.data(), bytes.size()));
        if (options.write_artifacts && options.write_checkpoints)
          save_checkpoint(out / ("stage_" + std::to_string(stage) + ".ckpt"), config, res.state, res.store);
        synthesize_old_prototypes(res.store, res.state, config.tau);
        res.metrics.stages.push_back(evaluate_stage(res.state, res.store, std::span(stages).first(t + 1)));
      } catch (const Error& e) {
        rethrow_with_stage(e, stage);
      }
      if (!options.quiet) {
        const auto& m = res.metrics.stages.back();
        std::cout << "stage " << stage << "/" << stages.size() << "  classes " << m.seen_classes << "  train "
                  << std::fixed << std::setprecision(2) << res.reports.back().train_accuracy << "%  A_t "
                  << m.accuracy << "%  (" << res.reports.back().wall_seconds << " s)\n"
                  << std::defaultfloat;
      }
    }
  }

  if (!options.quiet)
    std::cout << std::fixed << std::setprecision(2) << "A_bar " << res.metrics.a_bar() << "%  A_T "
              << res.metrics.a_last() << "%\n"
              << std::defaultfloat;

  if (options.write_artifacts) {
    write_text(out / "metrics.csv", res.metrics.to_csv());
    write_text(out / "summary.csv", std::string(kSummaryHeader) + "\n" + summary_row(config, res.metrics) + "\n");
    if (config.method == Method::drl) {
      nlohmann::json reports = nlohmann::json::array();
      for (const auto& r : res.reports) reports.push_back(report_json(r));
      write_text(out / "reports.json", reports.dump(2) + "\n");
      std::vector<Sample> test;
      for (const auto& ds : stages) test.insert(test.end(), ds.test.begin(), ds.test.end());
      dump_embeddings(res.state, test, res.state.class_registry, out / "embeddings.csv");
    }
  }
  return res;
}

void dump_embeddings(const IncrementalState& state, std::span<const Sample> samples,
                     const std::map<int, int>& stage_of, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write embeddings to " + path.string());
  const std::size_t width = state.feature_dim();
  out << "sample_id,label,stage";
  for (std::size_t i = 0; i < width; ++i) out << ",f" << i;
  out << '\n';
  char buf[32];
  for (const auto& s : samples) {
    auto it = stage_of.find(s.label);
    out << s.id << ',' << s.label << ',' << (it == stage_of.end() ? 0 : it->second);
    const Tensor f = state.forward(s.image).features;
    for (std::size_t i = 0; i < f.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", f[i]);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<EmbeddingRow> read_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,label,stage", 0) != 0)
    throw IoError(path.string() + ": unexpected embeddings header");
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    EmbeddingRow r;
    std::getline(ss, cell, ',');
    r.sample_id = std::stoull(cell);
    std::getline(ss, cell, ',');
    r.label = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.stage = std::stoi(cell);
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.empty()) throw IoError(path.string() + ": row without features");
    const std::size_t n = v.size();
    r.feature = Tensor({n}, std::move(v));
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AblationRow> ablate(const RunConfig& base, const AblationSpec& spec, BackboneCache& cache, bool write,
                                bool quiet) {
  std::vector<AblationRow> rows;
  for (LossKind loss : spec.losses)
    for (FusionMode fusion : spec.fusions)
      for (AttentionMode attention : spec.attentions)
        for (std::uint64_t seed : spec.seeds) {
          RunConfig c = base;
          c.loss.kind = loss;
          c.ipa.fusion = fusion;
          c.ipa.attention = attention;
          c.seed = seed;
          c.stream.seed = seed;
          ExperimentOptions opt;
          opt.write_artifacts = false;
          opt.quiet = true;
          opt.cache = &cache;
          ExperimentResult r = run_experiment(c, opt);
          if (!quiet)
            std::cout << summary_row(c, r.metrics) << std::endl;
          rows.push_back({c, r.metrics});
        }

  if (write) {
    fs::create_directories(base.output_dir);
    std::string summary = std::string(kSummaryHeader) + "\n";
    for (const auto& r : rows) summary += summary_row(r.config, r.metrics) + "\n";
    write_text(fs::path(base.output_dir) / "summary.csv", summary);

    std::ostringstream means;
    means << "fusion_mode,attention_mode,loss,seeds,mean_A_bar,mean_A_T\n";
    for (LossKind loss : spec.losses)
      for (FusionMode fusion : spec.fusions)
        for (AttentionMode attention : spec.attentions) {
          double a = 0.0, last = 0.0;
          std::size_t n = 0;
          for (const auto& r : rows)
            if (r.config.loss.kind == loss && r.config.ipa.fusion == fusion && r.config.ipa.attention == attention) {
              a += r.metrics.a_bar();
              last += r.metrics.a_last();
              ++n;
            }
          means << to_string(fusion) << ',' << to_string(attention) << ',' << to_string(loss)
                << (base.loss.alpha > 0.0 ? "+kd" : "") << ',' << n << ',' << fixed4(a / n) << ','
                << fixed4(last / n) << '\n';
        }
    write_text(fs::path(base.output_dir) / "ablation.csv", means.str());
  }
  return rows;
}

namespace {

std::string param_group(const std::string& name) {
  if (name == "head.weight") return "head";
  if (name == "head.log_scale") return "scale";
  if (name.find(".extra_gate.") != std::string::npos) return "extra_gate";
  if (name.find(".gate.") != std::string::npos) return "gate";
  if (name.find(".adapter.") != std::string::npos) return "adapter";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".transfer.") != std::string::npos) return "transfer";
  return "other";
}

}  // namespace

std::vector<GradCheckRecord> gradcheck_sweep(std::uint64_t seed, double h) {
  BackboneConfig bc;
  bc.image_side = 8;
  bc.patch_side = 4;
  bc.embed_dim = 16;
  bc.heads = 2;
  bc.blocks = 3;
  bc.ffn_hidden = 32;

  Backbone bb = Backbone::random_init(bc, mix_seed(seed, 1));
  freeze_all(bb.params());
  StageOptions prev_opt;
  prev_opt.bottleneck = 8;
  std::vector<StageModule> prev;
  prev.push_back(StageModule::create(bc, prev_opt, 1, mix_seed(seed, 2)));
  prev.back().freeze();

  Rng rng(mix_seed(seed, 3));
  std::vector<StreamContext> contexts(3);
  std::vector<std::size_t> targets{0, 1, 2};
  for (auto& ctx : contexts) {
    Tensor img({8, 8});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
    composite_forward(img, bb, prev, nullptr, &ctx);
  }

  struct Variant {
    std::string label;
    StageOptions ipa;
    LossConfig loss;
  };
  std::vector<Variant> variants;
  for (LossKind kind : {LossKind::das, LossKind::ce, LossKind::bce, LossKind::cosface})
    for (double alpha : {0.0, 0.5}) {
      Variant v;
      v.loss.kind = kind;
      v.loss.alpha = alpha;
      v.label = to_string(kind) + (alpha > 0.0 ? "+kd" : "");
      variants.push_back(v);
    }
  {
    Variant v;
    v.loss.das.k_plus = 1.5;
    v.loss.das.k_minus = 0.5;
    v.label = "das-margin+kd";
    variants.push_back(v);
  }
  for (FusionMode f : {FusionMode::sum, FusionMode::gate_part, FusionMode::gate_extra}) {
    Variant v;
    v.ipa.fusion = f;
    v.label = "das+kd";
    variants.push_back(v);
  }
  for (AttentionMode a : {AttentionMode::n_att, AttentionMode::s_att}) {
    Variant v;
    v.ipa.attention = a;
    v.label = "das+kd";
    variants.push_back(v);
  }
  {
    Variant v;
    v.ipa.reuse = AttentionReuse::per_head;
    v.label = "das+kd per_head";
    variants.push_back(v);
  }

  std::vector<GradCheckRecord> records;
  for (Variant& v : variants) {
    v.ipa.bottleneck = 8;
    v.ipa.gamma = 0.7;
    StageModule module = StageModule::create(bc, v.ipa, 2, mix_seed(seed, 4));
    LogitHead head = LogitHead::create(16, {10, 11, 12}, mix_seed(seed, 5));
    auto loss_fn = [&]() {
      std::vector<LossSample> batch;
      for (std::size_t i = 0; i < contexts.size(); ++i)
        batch.push_back({stream_forward(contexts[i], module).cls(), contexts[i].ptm_cls, targets[i]});
      return total_loss(batch, head, v.loss).total;
    };
    std::map<std::string, ParamRefs> groups;
    for (Param* p : module.params()) groups[param_group(p->name())].push_back(p);
    for (Param* p : head.params()) groups[param_group(p->name())].push_back(p);
    const std::string label = v.label + " " + to_string(v.ipa.fusion) + " " + to_string(v.ipa.attention);
    for (auto& [group, params] : groups) {
      const GradCheckResult r = finite_difference_check(loss_fn, params, h);
      const bool is_default = v.ipa.fusion == FusionMode::gate_adapt && v.ipa.attention == AttentionMode::r_att &&
                              v.ipa.reuse == AttentionReuse::head_mean;
      records.push_back({label, group, r.coordinates, r.max_rel_error, r.worst_param, is_default});
    }
  }
  return records;
}

}  // namespace drl
