#pragma once

#include <span>
#include <string>
#include <vector>

#include "drl/dataset.hpp"
#include "drl/engine.hpp"

namespace drl {

// Top-1 accuracy (percent) over the test samples of every given stage.
double accuracy_after_stage(const IncrementalState& state, const PrototypeStore& store,
                            std::span<const StageDataset> seen_stages);

// Arithmetic mean; throws ConfigError on an empty sequence.
double average_accuracy(std::span<const double> accuracies);

struct StageMetrics {
  int stage = 0;
  int seen_classes = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;  // percent
};

struct MetricsTable {
  std::vector<StageMetrics> stages;

  std::vector<double> accuracies() const;
  double a_bar() const;
  double a_last() const;

  // stage,seen_classes,correct,total,accuracy at round-trip precision.
  std::string to_csv() const;
  static MetricsTable from_csv(const std::string& text);
};

// Correct/total counts behind accuracy_after_stage.
StageMetrics evaluate_stage(const IncrementalState& state, const PrototypeStore& store,
                            std::span<const StageDataset> seen_stages);

}  // namespace drl
