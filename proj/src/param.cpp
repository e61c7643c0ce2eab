#include "drl/param.hpp"

#include "drl/error.hpp"

namespace drl {

Param::Param(std::string name, Tensor init, bool decays)
    : name_(std::move(name)),
      leaf_(std::make_shared<Node>()),
      momentum_(init.shape(), 0.0),
      decays_(decays) {
  require_finite(init, name_.c_str());
  leaf_->value = std::move(init);
  leaf_->requires_grad = true;
}

const Tensor& Param::grad() const {
  if (leaf_->grad.empty()) leaf_->grad = Tensor(leaf_->value.shape(), 0.0);
  return leaf_->grad;
}

void Param::set_frozen(bool f) {
  frozen_ = f;
  leaf_->requires_grad = !f;
}

void Param::zero_grad() {
  if (!leaf_->grad.empty()) leaf_->grad.fill(0.0);
}

std::size_t count_params(const ConstParamRefs& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->numel();
  return n;
}

std::uint64_t params_hash(const ConstParamRefs& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : params) {
    h = fnv1a(p->name().data(), p->name().size(), h);
    h = tensor_hash(p->value(), h);
  }
  return h;
}

void freeze_all(const ParamRefs& params) {
  for (auto* p : params) p->set_frozen(true);
}

}  // namespace drl
