#pragma once

#include <memory>
#include <string>
#include <vector>

#include "drl/autograd.hpp"

namespace drl {

// A named trainable tensor. The value lives in a tape leaf, so every graph
// built from var() accumulates its gradient here. Move-only: a copy would
// alias the leaf.
class Param {
 public:
  Param() = default;
  Param(std::string name, Tensor init, bool decays = true);
  Param(const Param&) = delete;
  Param& operator=(const Param&) = delete;
  Param(Param&&) noexcept = default;
  Param& operator=(Param&&) noexcept = default;

  const std::string& name() const { return name_; }
  const Tensor& value() const { return leaf_->value; }
  Tensor& mutable_value() { return leaf_->value; }
  const Tensor& grad() const;
  Tensor& momentum() { return momentum_; }
  const Tensor& momentum() const { return momentum_; }
  const Shape& shape() const { return leaf_->value.shape(); }
  std::size_t numel() const { return leaf_->value.size(); }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f);
  // Biases and normalisation gains are excluded from weight decay.
  bool decays() const { return decays_; }

  Var var() const { return Var(leaf_); }
  void zero_grad();

 private:
  std::string name_;
  std::shared_ptr<Node> leaf_;
  Tensor momentum_;
  bool frozen_ = false;
  bool decays_ = true;
};

using ParamRefs = std::vector<Param*>;
using ConstParamRefs = std::vector<const Param*>;

std::size_t count_params(const ConstParamRefs& params);
// FNV-1a over names, shapes and value bytes.
std::uint64_t params_hash(const ConstParamRefs& params);
void freeze_all(const ParamRefs& params);

}  // namespace drl
