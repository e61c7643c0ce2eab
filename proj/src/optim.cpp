#include "drl/optim.hpp"

#include <cmath>
#include <numbers>

#include "drl/error.hpp"

namespace drl {

void OptimizerConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("optimizer: base_lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (epochs <= 0) throw ConfigError("optimizer: epochs must be positive");
  if (batch_size == 0) throw ConfigError("optimizer: batch_size must be positive");
}

double cosine_lr(const OptimizerConfig& config, int epoch) {
  if (epoch >= config.epochs) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(epoch) / config.epochs;
  return config.base_lr * 0.5 * (1.0 + std::cos(phase));
}

void sgd_step(const ParamRefs& params, const OptimizerConfig& config, int epoch) {
  const double lr = cosine_lr(config, epoch);
  for (auto* p : params) {
    if (p->frozen()) {
      p->zero_grad();
      continue;
    }
    Tensor& w = p->mutable_value();
    Tensor& m = p->momentum();
    const Tensor& g = p->grad();
    const double wd = p->decays() ? config.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + wd * w[i];
      m[i] = config.momentum * m[i] + gi;
      w[i] -= lr * m[i];
    }
    require_finite(w, p->name().c_str());
    p->zero_grad();
  }
}

}  // namespace drl
