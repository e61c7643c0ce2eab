#include "drl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "drl/error.hpp"

namespace drl {

namespace {

double evaluate(const std::function<Var()>& loss_fn) {
  NoGradGuard guard;
  return loss_fn().item();
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

GradCheckResult finite_difference_check(const std::function<Var()>& loss_fn,
                                        const ParamRefs& params, double h,
                                        double scale_floor) {
  for (auto* p : params) p->zero_grad();
  const Var loss = loss_fn();
  loss.backward();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad());
  for (auto* p : params) p->zero_grad();

  const double base = loss.item();
  if (!same_bits(base, evaluate(loss_fn)) || !same_bits(base, evaluate(loss_fn))) {
    throw DeterminismError("finite_difference_check: loss function is not deterministic");
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (p.frozen()) continue;
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = evaluate(loss_fn);
      w[i] = orig - h;
      const double down = evaluate(loss_fn);
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), scale_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(rel, result.max_rel_error);
        result.worst_param = p.name();
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace drl
