#include "drl/supervision.hpp"

#include <algorithm>
#include <cmath>

#include "drl/error.hpp"
#include "drl/rng.hpp"

namespace drl {

namespace {

// log(1 + e^a) without overflow.
double softplus(double a) { return a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

double stable_sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

void check_target(std::size_t target, std::size_t n, const char* what) {
  if (target >= n) {
    throw DimensionError(std::string(what) + ": target " + std::to_string(target) +
                         " out of range for " + std::to_string(n) + " classes");
  }
}

// Negative-side normaliser over {z_j : j != target} and the anchor k-.
struct NegativePart {
  double max;
  double sum;  // sum of exp(x - max)
};

NegativePart negative_part(std::span<const double> z, std::size_t target, double k_minus) {
  double mx = k_minus;
  for (std::size_t j = 0; j < z.size(); ++j)
    if (j != target) mx = std::max(mx, z[j]);
  double s = std::exp(k_minus - mx);
  for (std::size_t j = 0; j < z.size(); ++j)
    if (j != target) s += std::exp(z[j] - mx);
  return {mx, s};
}

}  // namespace

LogitHead LogitHead::create(std::size_t dim, std::vector<int> classes, std::uint64_t seed,
                            double initial_scale) {
  if (classes.empty()) throw ConfigError("LogitHead: no classes");
  if (!(initial_scale > 0.0)) throw ConfigError("LogitHead: initial scale must be positive");
  Rng rng(seed);
  LogitHead head;
  head.weight = Param("head.weight", rng.normal_tensor({dim, classes.size()}, 1.0));
  head.log_scale = Param("head.log_scale", Tensor({1}, std::log(initial_scale)), false);
  head.classes = std::move(classes);
  return head;
}

double LogitHead::scale() const { return std::exp(log_scale.value()[0]); }

std::size_t LogitHead::index_of(int class_id) const {
  auto it = std::find(classes.begin(), classes.end(), class_id);
  if (it == classes.end()) {
    throw ProtocolError("class " + std::to_string(class_id) + " is not handled by this head");
  }
  return static_cast<std::size_t>(it - classes.begin());
}

ParamRefs LogitHead::params() { return {&weight, &log_scale}; }
ConstParamRefs LogitHead::params() const { return {&weight, &log_scale}; }

Var cosine_scores(const Var& feature, const LogitHead& head) {
  const std::size_t d = feature.value().size();
  if (head.weight.shape()[0] != d) {
    throw DimensionError("cosine_scores: feature width " + std::to_string(d) +
                         " vs head " + shape_str(head.weight.shape()));
  }
  Var f = reshape(l2_normalize(reshape(feature, {d})), {1, d});
  Var cos = matmul(f, normalize_cols(head.weight.var()));
  return reshape(cos, {head.num_classes()});
}

Var compute_logits(const Var& feature, const LogitHead& head) {
  return scale_by(cosine_scores(feature, head), exp(head.log_scale.var()));
}

Tensor compute_logits(const Tensor& feature, const LogitHead& head) {
  NoGradGuard guard;
  return compute_logits(constant(feature), head).value();
}

std::pair<double, double> DasConfig::anchors() const {
  if (k_plus.has_value() != k_minus.has_value()) {
    throw ConfigError("DAS: k_plus and k_minus must be set together");
  }
  if (k_plus) return {*k_plus, *k_minus};
  return {k, k};
}

double DasConfig::margin() const {
  auto [kp, km] = anchors();
  return kp - km;
}

void DasConfig::validate() const {
  auto [kp, km] = anchors();
  if (!std::isfinite(kp) || !std::isfinite(km)) throw ConfigError("DAS: anchors must be finite");
  if (kp - km < 0.0) throw ConfigError("DAS: margin k_plus - k_minus must be >= 0");
  if (!(lambda_p >= 0.0) || !(lambda_n >= 0.0)) throw ConfigError("DAS: loss weights must be >= 0");
}

DasTerms das_loss(std::span<const double> z, std::size_t target, const DasConfig& config) {
  check_target(target, z.size(), "das_loss");
  auto [kp, km] = config.anchors();
  DasTerms t;
  t.l_pos = softplus(kp - z[target]);
  const NegativePart neg = negative_part(z, target, km);
  t.l_neg = (neg.max + std::log(neg.sum)) - km;
  return t;
}

std::pair<Var, Var> das_loss(const Var& z, std::size_t target, const DasConfig& config) {
  const DasTerms terms = das_loss(z.value().values(), target, config);
  auto [kp, km] = config.anchors();
  Var pos = make_op(Tensor({1}, terms.l_pos), {z},
                    [target, kp](Node& self) {
                      const double zt = self.inputs[0]->value[target];
                      self.inputs[0]->grad_buffer()[target] -= stable_sigmoid(kp - zt) * self.grad[0];
                    },
                    "das_pos");
  Var neg = make_op(Tensor({1}, terms.l_neg), {z},
                    [target, km](Node& self) {
                      const Tensor& zv = self.inputs[0]->value;
                      const NegativePart np = negative_part(zv.values(), target, km);
                      Tensor& acc = self.inputs[0]->grad_buffer();
                      for (std::size_t j = 0; j < zv.size(); ++j) {
                        if (j == target) continue;
                        acc[j] += self.grad[0] * std::exp(zv[j] - np.max) / np.sum;
                      }
                    },
                    "das_neg");
  return {pos, neg};
}

std::pair<double, double> das_probabilities(std::span<const double> z, std::size_t target,
                                            const DasConfig& config) {
  const DasTerms t = das_loss(z, target, config);
  return {std::exp(-t.l_pos), std::exp(-t.l_neg)};
}

DasGradients das_gradients(std::span<const double> z, std::size_t target, const DasConfig& config) {
  check_target(target, z.size(), "das_gradients");
  Var zv(Tensor({z.size()}, std::vector<double>(z.begin(), z.end())), true);
  auto [pos, neg] = das_loss(zv, target, config);
  DasGradients g;
  pos.backward();
  g.d_pos = zv.node()->grad_buffer();
  zv.node()->grad.fill(0.0);
  neg.backward();
  g.d_neg = zv.node()->grad_buffer();
  return g;
}

DasTerms das_loss_multilabel(std::span<const double> z, std::span<const int> labels,
                             const DasConfig& config) {
  if (labels.size() != z.size()) throw DimensionError("das_loss_multilabel: label/logit size mismatch");
  auto [kp, km] = config.anchors();
  DasTerms t;
  double mx = km;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (labels[j]) {
      t.l_pos += softplus(kp - z[j]);
    } else {
      mx = std::max(mx, z[j]);
    }
  }
  double s = std::exp(km - mx);
  for (std::size_t j = 0; j < z.size(); ++j)
    if (!labels[j]) s += std::exp(z[j] - mx);
  t.l_neg = (mx + std::log(s)) - km;
  return t;
}

double kd_loss(const Tensor& f_new, const Tensor& f_ptm) {
  return 1.0 - cosine_similarity(f_new, f_ptm);
}

Var kd_loss(const Var& f_new, const Tensor& f_ptm) {
  const double n = l2_norm(f_ptm.values());
  if (n == 0.0) throw DegenerateInputError("kd_loss: zero-norm PTM feature");
  Tensor unit = f_ptm.reshaped({f_ptm.size()});
  for (std::size_t i = 0; i < unit.size(); ++i) unit[i] /= n;
  Var f = l2_normalize(reshape(f_new, {f_new.value().size()}));
  return add_scalar(scale(dot(f, constant(std::move(unit))), -1.0), 1.0);
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "das") return LossKind::das;
  if (name == "ce") return LossKind::ce;
  if (name == "bce") return LossKind::bce;
  if (name == "cosface") return LossKind::cosface;
  throw ConfigError("unknown loss kind '" + name + "' (expected das, ce, bce or cosface)");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::das: return "das";
    case LossKind::ce: return "ce";
    case LossKind::bce: return "bce";
    case LossKind::cosface: return "cosface";
  }
  return "?";
}

Var cross_entropy(const Var& z, std::size_t target) {
  const Tensor& zv = z.value();
  check_target(target, zv.size(), "cross_entropy");
  const double mx = *std::max_element(zv.values().begin(), zv.values().end());
  double s = 0.0;
  for (double x : zv.values()) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  return make_op(Tensor({1}, lse - zv[target]), {z},
                 [target, lse](Node& self) {
                   const Tensor& v = self.inputs[0]->value;
                   Tensor& acc = self.inputs[0]->grad_buffer();
                   for (std::size_t j = 0; j < v.size(); ++j) {
                     const double p = std::exp(v[j] - lse);
                     acc[j] += self.grad[0] * (p - (j == target ? 1.0 : 0.0));
                   }
                 },
                 "cross_entropy");
}

Var binary_cross_entropy(const Var& z, std::size_t target) {
  const Tensor& zv = z.value();
  check_target(target, zv.size(), "binary_cross_entropy");
  const double c = static_cast<double>(zv.size());
  double s = 0.0;
  for (std::size_t j = 0; j < zv.size(); ++j) s += softplus(zv[j]) - (j == target ? zv[j] : 0.0);
  return make_op(Tensor({1}, s / c), {z},
                 [target, c](Node& self) {
                   const Tensor& v = self.inputs[0]->value;
                   Tensor& acc = self.inputs[0]->grad_buffer();
                   for (std::size_t j = 0; j < v.size(); ++j) {
                     const double y = j == target ? 1.0 : 0.0;
                     acc[j] += self.grad[0] * (stable_sigmoid(v[j]) - y) / c;
                   }
                 },
                 "binary_cross_entropy");
}

Var cosface_loss(const Var& cosines, const Var& scale, std::size_t target, double margin) {
  check_target(target, cosines.value().size(), "cosface_loss");
  Tensor offset(cosines.shape(), 0.0);
  offset[target] = -margin;
  return cross_entropy(scale_by(add(cosines, constant(std::move(offset))), scale), target);
}

double baseline_loss(LossKind kind, std::span<const double> values, std::size_t target,
                     double scale, double margin) {
  NoGradGuard guard;
  Var v = constant(Tensor({values.size()}, std::vector<double>(values.begin(), values.end())));
  switch (kind) {
    case LossKind::ce: return cross_entropy(v, target).item();
    case LossKind::bce: return binary_cross_entropy(v, target).item();
    case LossKind::cosface: return cosface_loss(v, constant(Tensor({1}, scale)), target, margin).item();
    case LossKind::das: break;
  }
  throw ConfigError("baseline_loss: '" + to_string(kind) + "' is not a baseline loss");
}

double baseline_loss(const std::string& kind, std::span<const double> values, std::size_t target,
                     double scale, double margin) {
  return baseline_loss(parse_loss_kind(kind), values, target, scale, margin);
}

double combine_loss(const LossBreakdown& p, const LossConfig& config) {
  return config.das.lambda_p * p.l_pos + config.das.lambda_n * p.l_neg + p.l_base +
         config.alpha * p.l_kd;
}

LossResult total_loss(std::span<const LossSample> batch, const LogitHead& head,
                      const LossConfig& config) {
  if (batch.empty()) throw ConfigError("total_loss: empty batch");
  config.das.validate();
  std::vector<Var> pos, neg, base, kd;
  const Var s_var = exp(head.log_scale.var());
  for (const auto& s : batch) {
    Var cos = cosine_scores(s.stream_feature, head);
    switch (config.kind) {
      case LossKind::das: {
        auto [p, n] = das_loss(scale_by(cos, s_var), s.target, config.das);
        pos.push_back(p);
        neg.push_back(n);
        break;
      }
      case LossKind::ce: base.push_back(cross_entropy(scale_by(cos, s_var), s.target)); break;
      case LossKind::bce: base.push_back(binary_cross_entropy(scale_by(cos, s_var), s.target)); break;
      case LossKind::cosface: base.push_back(cosface_loss(cos, s_var, s.target, config.cosface_margin)); break;
    }
    if (config.alpha != 0.0) kd.push_back(kd_loss(s.stream_feature, s.ptm_feature));
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  auto batch_mean = [inv_n](const std::vector<Var>& parts) {
    return scale(sum(concat(parts)), inv_n);
  };

  LossResult r;
  r.breakdown.alpha = config.alpha;
  Var total;
  if (config.kind == LossKind::das) {
    Var mp = batch_mean(pos);
    Var mn = batch_mean(neg);
    r.breakdown.l_pos = mp.item();
    r.breakdown.l_neg = mn.item();
    total = add(scale(mp, config.das.lambda_p), scale(mn, config.das.lambda_n));
  } else {
    total = batch_mean(base);
    r.breakdown.l_base = total.item();
  }
  if (!kd.empty()) {
    Var mk = batch_mean(kd);
    r.breakdown.l_kd = mk.item();
    total = add(total, scale(mk, config.alpha));
  }
  r.total = total;
  r.breakdown.total = combine_loss(r.breakdown, config);
  return r;
}

}  // namespace drl
