#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drl/autograd.hpp"
#include "drl/param.hpp"

namespace drl {

// Cosine classifier over the classes of one stage: z_i = s * cos(w_i, f),
// with s = exp(rho) kept positive.
struct LogitHead {
  Param weight;     // [d x C]
  Param log_scale;  // [1]
  std::vector<int> classes;

  static LogitHead create(std::size_t dim, std::vector<int> classes, std::uint64_t seed,
                          double initial_scale = 10.0);

  double scale() const;
  std::size_t num_classes() const { return classes.size(); }
  // Index of a class id within the head; throws ProtocolError if absent.
  std::size_t index_of(int class_id) const;
  ParamRefs params();
  ConstParamRefs params() const;
};

// cos(w_i, f) for every column of the head, [C].
Var cosine_scores(const Var& feature, const LogitHead& head);
Var compute_logits(const Var& feature, const LogitHead& head);
Tensor compute_logits(const Tensor& feature, const LogitHead& head);

struct DasConfig {
  double k = 1.0;
  std::optional<double> k_plus;
  std::optional<double> k_minus;
  double lambda_p = 3.0;
  double lambda_n = 1.0;

  // (k_+, k_-); both equal k unless separate anchors are configured.
  std::pair<double, double> anchors() const;
  double margin() const;
  void validate() const;
};

struct DasTerms {
  double l_pos = 0.0;
  double l_neg = 0.0;
};

// Single-label decoupled anchor terms, evaluated in log space:
//   l_pos = log(1 + e^{k+ - z_t}),  l_neg = logsumexp({z_j}_{j != t} u {k-}) - k-.
DasTerms das_loss(std::span<const double> z, std::size_t target, const DasConfig& config);
std::pair<Var, Var> das_loss(const Var& z, std::size_t target, const DasConfig& config);

// p^pos and p^neg recovered from the log-space terms.
std::pair<double, double> das_probabilities(std::span<const double> z, std::size_t target,
                                            const DasConfig& config);

struct DasGradients {
  Tensor d_pos;  // d l_pos / d z
  Tensor d_neg;  // d l_neg / d z
};
DasGradients das_gradients(std::span<const double> z, std::size_t target, const DasConfig& config);

// Multi-label form: l_pos = -sum_i y_i log p_i^pos, negatives are the classes
// with y_j = 0.
DasTerms das_loss_multilabel(std::span<const double> z, std::span<const int> labels,
                             const DasConfig& config);

// 1 - cos(f_new, f_ptm); the PTM side is a constant.
double kd_loss(const Tensor& f_new, const Tensor& f_ptm);
Var kd_loss(const Var& f_new, const Tensor& f_ptm);

enum class LossKind { das, ce, bce, cosface };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

Var cross_entropy(const Var& z, std::size_t target);
Var binary_cross_entropy(const Var& z, std::size_t target);
// CE over s * (cos - m * onehot(target)).
Var cosface_loss(const Var& cosines, const Var& scale, std::size_t target, double margin);

// Scalar baselines. ce/bce take logits z; cosface takes cosines and uses `scale`.
double baseline_loss(LossKind kind, std::span<const double> values, std::size_t target,
                     double scale = 1.0, double margin = 0.35);
double baseline_loss(const std::string& kind, std::span<const double> values, std::size_t target,
                     double scale = 1.0, double margin = 0.35);

struct LossConfig {
  LossKind kind = LossKind::das;
  DasConfig das;
  double alpha = 0.5;  // weight of the distillation term
  double cosface_margin = 0.35;
};

struct LossBreakdown {
  double l_pos = 0.0;
  double l_neg = 0.0;
  double l_base = 0.0;  // ce / bce / cosface when one of those is selected
  double l_kd = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

// The weighted combination in its fixed evaluation order:
// lambda_p * l_pos + lambda_n * l_neg + l_base + alpha * l_kd.
double combine_loss(const LossBreakdown& parts, const LossConfig& config);

struct LossSample {
  Var stream_feature;  // class token of the trainable stream
  Tensor ptm_feature;  // class token of the frozen backbone
  std::size_t target = 0;
};

struct LossResult {
  Var total;  // batch mean, differentiable
  LossBreakdown breakdown;
};

// Batch mean of the configured objective plus alpha * KD. Throws ConfigError
// on an empty batch.
LossResult total_loss(std::span<const LossSample> batch, const LogitHead& head,
                      const LossConfig& config);

}  // namespace drl
