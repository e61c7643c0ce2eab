#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "drl/backbone.hpp"
#include "drl/dataset.hpp"
#include "drl/ipa.hpp"
#include "drl/optim.hpp"
#include "drl/supervision.hpp"

namespace drl {

struct StageConfig {
  StageOptions ipa;
  LossConfig loss;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
};

// Backbone plus every sealed stream. Stream s (1-based) is streams[s - 1].
struct IncrementalState {
  Backbone backbone;
  std::vector<StageModule> streams;
  int stage_index = 0;
  std::map<int, int> class_registry;  // class id -> stage of first appearance

  static IncrementalState from_backbone(Backbone backbone);

  std::size_t num_streams() const { return streams.size() + 1; }
  std::size_t feature_dim() const { return num_streams() * static_cast<std::size_t>(backbone.config.embed_dim); }
  int stage_of(int class_id) const;
  ConstParamRefs frozen_params() const;
  CompositeOutput forward(const Tensor& image, ForwardCounter* counter = nullptr) const;
};

enum class Provenance : std::uint8_t { measured = 0, synthesized = 1 };

struct ClassPrototype {
  int stage = 0;
  std::vector<Tensor> segments;  // per stream; empty tensor marks a missing segment
  std::vector<Provenance> provenance;
};

class PrototypeStore {
 public:
  void set_segment(int class_id, int stage, std::size_t stream, Tensor segment, Provenance provenance);
  bool has_segment(int class_id, std::size_t stream) const;
  const Tensor& segment(int class_id, std::size_t stream) const;
  Provenance provenance(int class_id, std::size_t stream) const;
  // Segments 0..streams-1 joined; throws ProtocolError when one is missing.
  Tensor concatenated(int class_id, std::size_t streams) const;
  void require_complete(std::size_t streams) const;

  std::size_t size() const { return classes_.size(); }
  const std::map<int, ClassPrototype>& classes() const { return classes_; }
  std::map<int, ClassPrototype>& classes() { return classes_; }
  bool operator==(const PrototypeStore&) const;

 private:
  std::map<int, ClassPrototype> classes_;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  // sample-weighted mean over the epoch
};

struct TrainReport {
  int stage = 0;
  std::vector<EpochLog> epochs;
  std::map<int, double> per_class_train_accuracy;  // percent
  double train_accuracy = 0.0;
  double wall_seconds = 0.0;
  std::size_t trainable_params = 0;  // stage module plus head
  std::size_t frozen_params = 0;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

// Trains a fresh StageModule and cosine head on D^t, then seals the module
// into the state. Only dataset.train is read; each access is logged.
TrainReport run_stage(IncrementalState& state, const StageDataset& dataset, const StageConfig& config,
                      DataAccessLog* log = nullptr);

// Per-stream class-token means of every class in `dataset.train`, measured
// through one composite pass per sample.
void extract_prototypes(const IncrementalState& state, const StageDataset& dataset, PrototypeStore& store);

// Softmax weights over `current` classes of cos(c_o, c_j) / tau in stream s*.
std::vector<double> synthesis_weights(const PrototypeStore& store, int old_class, std::span<const int> current,
                                      std::size_t shared_stream, double tau);

// Fills stream-t segments of old classes from the current stage's classes.
void synthesize_old_prototypes(PrototypeStore& store, const IncrementalState& state, double tau = 0.1);

struct Classification {
  int predicted = -1;
  std::vector<std::pair<int, double>> scores;  // ascending class id
};

Classification classify(const Tensor& feature, const PrototypeStore& store);

using ProbeSnapshot = std::vector<std::vector<Tensor>>;  // [sample][stream] class tokens

ProbeSnapshot snapshot_probe(const IncrementalState& state, std::span<const Sample> probe);
// True iff the streams covered by the snapshot reproduce it bit-identically.
bool probe_invariance_check(const IncrementalState& state, std::span<const Sample> probe,
                            const ProbeSnapshot& snapshot);

// Naive sequential finetuning: one adapter stream and a growing cosine head,
// never frozen, trained with cross-entropy on each stage in turn. Returns A_t
// for every stage.
struct FinetuneResult {
  std::vector<double> accuracies;
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  std::vector<int> seen_classes;
};
FinetuneResult run_finetune_baseline(const Backbone& backbone, std::span<const StageDataset> stages,
                                     const StageConfig& config);

}  // namespace drl
