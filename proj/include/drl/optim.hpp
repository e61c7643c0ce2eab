#pragma once

#include <cstddef>

#include "drl/param.hpp"

namespace drl {

struct OptimizerConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 20;
  std::size_t batch_size = 48;

  void validate() const;
};

// base_lr * (1 + cos(pi * epoch / epochs)) / 2; zero at epoch == epochs.
double cosine_lr(const OptimizerConfig& config, int epoch);

// Momentum SGD with decoupled-from-bias weight decay:
//   g = grad + wd * w (decaying params only);  m = mu * m + g;  w -= lr * m.
// Frozen params are left untouched. All grads are cleared afterwards.
void sgd_step(const ParamRefs& params, const OptimizerConfig& config, int epoch);

}  // namespace drl
