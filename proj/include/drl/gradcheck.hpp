#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "drl/param.hpp"

namespace drl {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares the tape gradient of loss_fn() against central differences
// (L(p+h) - L(p-h)) / 2h for every coordinate of every non-frozen param.
// Relative error uses max(|analytic|, |numeric|, scale_floor) as denominator.
// Throws DeterminismError if two evaluations at the same point disagree.
GradCheckResult finite_difference_check(const std::function<Var()>& loss_fn,
                                        const ParamRefs& params, double h = 1e-5,
                                        double scale_floor = 1e-8);

}  // namespace drl
