#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "drl/tensor.hpp"

namespace drl {

// One vertex of the reverse-mode tape.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

// Global switch for tape recording; off during evaluation passes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  // Seeds d(this)/d(this) = seed and propagates through the tape. The value
  // must hold exactly one element.
  void backward(double seed = 1.0) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);

// Creates the result node of an op. The backward closure is retained only
// when recording is on and some input requires a gradient.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward,
            const char* name);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// x [m x n] (or [n]) plus a bias row b [n] broadcast over rows.
Var add_bias(const Var& x, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
// a * s where s holds a single element.
Var scale_by(const Var& a, const Var& s);

Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
Var transpose(const Var& a);

Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var row(const Var& a, std::size_t r);
Var concat(std::span<const Var> parts);
Var reshape(const Var& a, Shape shape);

// a + m * (b - a), elementwise, clamped into [min(a, b), max(a, b)] so the
// result is an exact convex combination for m in [0, 1].
Var convex_blend(const Var& a, const Var& b, const Var& m);

Var l2_normalize(const Var& v);
Var normalize_cols(const Var& w);
Var dot(const Var& a, const Var& b);
Var sum(const Var& a);
Var mean(const Var& a);

double gelu_value(double x);

}  // namespace drl
