#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "drl/checkpoint.hpp"
#include "drl/config.hpp"
#include "drl/datagen.hpp"
#include "drl/engine.hpp"
#include "drl/metrics.hpp"

namespace drl {

// Pretrained backbones keyed by everything that determines them, so sweeps
// over head-side options pretrain once per seed.
class BackboneCache {
 public:
  const Backbone& get(const RunConfig& config, const StageDataset& base);
  std::size_t size() const { return cache_.size(); }

 private:
  std::map<std::string, std::unique_ptr<Backbone>> cache_;
};

struct ExperimentOptions {
  bool write_artifacts = true;
  bool write_checkpoints = true;
  bool quiet = false;
  BackboneCache* cache = nullptr;
};

struct ExperimentResult {
  RunConfig config;
  MetricsTable metrics;
  std::vector<TrainReport> reports;
  std::vector<std::uint64_t> checkpoint_digests;  // FNV-1a of each stage_<t>.ckpt image
  IncrementalState state;
  PrototypeStore store;
  ClassStream stream;
};

ClassStream make_stream(const RunConfig& config);

// Pretrain, then per stage: run_stage, extract prototypes, checkpoint,
// synthesize, evaluate. Writes metrics.csv, summary.csv, embeddings.csv,
// reports.json, manifest.csv and stage_<t>.ckpt into config.output_dir.
ExperimentResult run_experiment(const RunConfig& config, const ExperimentOptions& options = {});

inline constexpr const char* kSummaryHeader = "method,fusion_mode,attention_mode,loss,seed,A_bar,A_T";
std::string summary_row(const RunConfig& config, const MetricsTable& metrics);

// sample_id,label,stage,f0..f{(t+1)d-1}; one row per sample.
void dump_embeddings(const IncrementalState& state, std::span<const Sample> samples,
                     const std::map<int, int>& stage_of, const std::filesystem::path& path);

struct EmbeddingRow {
  std::uint64_t sample_id = 0;
  int label = 0;
  int stage = 0;
  Tensor feature;
};
std::vector<EmbeddingRow> read_embeddings(const std::filesystem::path& path);

struct AblationSpec {
  std::vector<FusionMode> fusions{FusionMode::sum, FusionMode::gate_part, FusionMode::gate_adapt};
  std::vector<AttentionMode> attentions{AttentionMode::n_att, AttentionMode::r_att};
  std::vector<LossKind> losses{LossKind::das};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct AblationRow {
  RunConfig config;
  MetricsTable metrics;
};

// Every combination of the spec on top of `base`. Writes summary.csv (one
// row per run) and ablation.csv (seed means per combination) into
// base.output_dir.
std::vector<AblationRow> ablate(const RunConfig& base, const AblationSpec& spec, BackboneCache& cache,
                                bool write = true, bool quiet = false);

struct GradCheckRecord {
  std::string label;  // e.g. "das+kd gate_adapt r_att"
  std::string group;  // adapter, gate, extra_gate, attention, transfer, head, scale
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool default_architecture = true;  // gate_adapt, r_att, head-mean reuse
};

// Finite-difference sweep over every trainable group of a small stage-2
// network (image 8, patch 4, d 16, 2 heads, 3 blocks, r 8) for each loss with
// and without distillation, plus every fusion and attention variant.
std::vector<GradCheckRecord> gradcheck_sweep(std::uint64_t seed = 0, double h = 1e-5);

}  // namespace drl
