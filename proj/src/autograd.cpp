#include "drl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "drl/error.hpp"

namespace drl {

namespace {

thread_local bool g_grad_enabled = true;

void accumulate(Node& target, const Tensor& delta) {
  Tensor& g = target.grad_buffer();
  double* p = g.data();
  const double* d = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) p[i] += d[i];
}

bool wants(const std::shared_ptr<Node>& n) { return n->requires_grad; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.value().size() != 1) {
    throw DimensionError(std::string(op) + ": expected a scalar, got " + shape_str(s.shape()));
  }
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Var::item() const {
  if (value().size() != 1) throw DimensionError("item() on " + shape_str(shape()));
  return value()[0];
}

void Var::backward(double seed) const {
  if (value().size() != 1) {
    throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; input order fixes the traversal order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward,
            const char* name) {
  require_finite(value, name);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (GradMode::enabled()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  return make_op(matmul(a.value(), b.value()), {a, b},
                 [](Node& self) {
                   auto& A = self.inputs[0];
                   auto& B = self.inputs[1];
                   if (wants(A)) accumulate(*A, matmul(self.grad, transpose(B->value)));
                   if (wants(B)) accumulate(*B, matmul(transpose(A->value), self.grad));
                 },
                 "matmul");
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b},
                 [](Node& self) {
                   for (auto& in : self.inputs)
                     if (wants(in)) accumulate(*in, self.grad);
                 },
                 "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b},
                 [](Node& self) {
                   if (wants(self.inputs[0])) accumulate(*self.inputs[0], self.grad);
                   if (wants(self.inputs[1])) {
                     Tensor g = self.grad;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] = -g[i];
                     accumulate(*self.inputs[1], g);
                   }
                 },
                 "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op(std::move(out), {a, b},
                 [](Node& self) {
                   auto& A = self.inputs[0];
                   auto& B = self.inputs[1];
                   if (wants(A)) {
                     Tensor g = self.grad;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] *= B->value[i];
                     accumulate(*A, g);
                   }
                   if (wants(B)) {
                     Tensor g = self.grad;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] *= A->value[i];
                     accumulate(*B, g);
                   }
                 },
                 "mul");
}

Var convex_blend(const Var& a, const Var& b, const Var& m) {
  require_same_shape(a, b, "convex_blend");
  require_same_shape(a, m, "convex_blend");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i], y = b.value()[i];
    const double w = m.value()[i];
    const double v = (1.0 - w) * x + w * y;
    out[i] = std::clamp(v, std::min(x, y), std::max(x, y));
  }
  return make_op(std::move(out), {a, b, m},
                 [](Node& self) {
                   auto& A = self.inputs[0];
                   auto& B = self.inputs[1];
                   auto& M = self.inputs[2];
                   const std::size_t n = self.grad.size();
                   if (wants(A)) {
                     Tensor g(A->value.shape());
                     for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * (1.0 - M->value[i]);
                     accumulate(*A, g);
                   }
                   if (wants(B)) {
                     Tensor g(B->value.shape());
                     for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * M->value[i];
                     accumulate(*B, g);
                   }
                   if (wants(M)) {
                     Tensor g(M->value.shape());
                     for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * (B->value[i] - A->value[i]);
                     accumulate(*M, g);
                   }
                 },
                 "convex_blend");
}

Var add_bias(const Var& x, const Var& b) {
  const std::size_t n = x.value().cols();
  if (b.value().rank() != 1 || b.value().size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t m = out.size() / n;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.value()[j];
  return make_op(std::move(out), {x, b},
                 [m, n](Node& self) {
                   if (wants(self.inputs[0])) accumulate(*self.inputs[0], self.grad);
                   if (wants(self.inputs[1])) {
                     Tensor g({n}, 0.0);
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                     accumulate(*self.inputs[1], g);
                   }
                 },
                 "add_bias");
}

Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return make_op(std::move(out), {a},
                 [c](Node& self) {
                   Tensor g = self.grad;
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c;
                   accumulate(*self.inputs[0], g);
                 },
                 "scale");
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  return make_op(std::move(out), {a}, [](Node& self) { accumulate(*self.inputs[0], self.grad); },
                 "add_scalar");
}

Var scale_by(const Var& a, const Var& s) {
  require_scalar(s, "scale_by");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
  return make_op(std::move(out), {a, s},
                 [](Node& self) {
                   auto& A = self.inputs[0];
                   auto& S = self.inputs[1];
                   if (wants(A)) {
                     Tensor g = self.grad;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] *= S->value[0];
                     accumulate(*A, g);
                   }
                   if (wants(S)) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       acc += self.grad[i] * A->value[i];
                     S->grad_buffer()[0] += acc;
                   }
                 },
                 "scale_by");
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Var gelu(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(out[i]);
  return make_op(std::move(out), {a},
                 [](Node& self) {
                   const Tensor& x = self.inputs[0]->value;
                   Tensor g = self.grad;
                   const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
                     const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                     g[i] *= cdf + x[i] * pdf;
                   }
                   accumulate(*self.inputs[0], g);
                 },
                 "gelu");
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op(std::move(out), {a},
                 [](Node& self) {
                   Tensor g = self.grad;
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     const double y = self.value[i];
                     g[i] *= y * (1.0 - y);
                   }
                   accumulate(*self.inputs[0], g);
                 },
                 "sigmoid");
}

Var exp(const Var& a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return make_op(std::move(out), {a},
                 [](Node& self) {
                   Tensor g = self.grad;
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] *= self.value[i];
                   accumulate(*self.inputs[0], g);
                 },
                 "exp");
}

Var softmax_rows(const Var& a) {
  return make_op(softmax_rows(a.value()), {a},
                 [](Node& self) {
                   const Tensor& y = self.value;
                   const std::size_t n = y.shape().back();
                   const std::size_t m = y.size() / n;
                   Tensor g(y.shape());
                   for (std::size_t i = 0; i < m; ++i) {
                     double s = 0.0;
                     for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * y[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       g[i * n + j] = y[i * n + j] * (self.grad[i * n + j] - s);
                   }
                   accumulate(*self.inputs[0], g);
                 },
                 "softmax_rows");
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t n = x.value().cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias do not match width " + std::to_string(n));
  }
  const std::size_t m = x.value().size() / n;
  Tensor xhat(x.shape());
  std::vector<double> inv_std(m);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.value().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return make_op(
      std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        auto& X = self.inputs[0];
        auto& G = self.inputs[1];
        auto& B = self.inputs[2];
        if (wants(G) || wants(B)) {
          Tensor gg({n}, 0.0), gb({n}, 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              gg[j] += self.grad[i * n + j] * xhat[i * n + j];
              gb[j] += self.grad[i * n + j];
            }
          if (wants(G)) accumulate(*G, gg);
          if (wants(B)) accumulate(*B, gb);
        }
        if (wants(X)) {
          Tensor gx(X->value.shape());
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = self.grad[i * n + j] * G->value[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              gx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
          }
          accumulate(*X, gx);
        }
      },
      "layer_norm");
}

Var transpose(const Var& a) {
  return make_op(transpose(a.value()), {a},
                 [](Node& self) { accumulate(*self.inputs[0], transpose(self.grad)); },
                 "transpose");
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  const Tensor& v = a.value();
  if (v.rank() != 2 || begin + count > v.cols() || count == 0) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_str(v.shape()));
  }
  const std::size_t m = v.rows(), n = v.cols();
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = v(i, begin + j);
  return make_op(std::move(out), {a},
                 [m, n, begin, count](Node& self) {
                   Tensor g({m, n}, 0.0);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < count; ++j) g(i, begin + j) = self.grad(i, j);
                   accumulate(*self.inputs[0], g);
                 },
                 "slice_cols");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().rows() != m) {
      throw DimensionError("concat_cols: row mismatch at " + shape_str(p.shape()));
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, off + j) = parts[k].value()(i, j);
    off += widths[k];
  }
  return make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                 [m, widths](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     if (wants(self.inputs[k])) {
                       Tensor g({m, widths[k]});
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < widths[k]; ++j) g(i, j) = self.grad(i, off + j);
                       accumulate(*self.inputs[k], g);
                     }
                     off += widths[k];
                   }
                 },
                 "concat_cols");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t n = parts[0].value().cols();
  std::vector<double> v;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.value().cols() != n) {
      throw DimensionError("concat_rows: width mismatch at " + shape_str(p.shape()));
    }
    sizes.push_back(p.value().size());
    v.insert(v.end(), p.value().values().begin(), p.value().values().end());
  }
  const std::size_t m = v.size() / n;
  return make_op(Tensor({m, n}, std::move(v)), std::vector<Var>(parts.begin(), parts.end()),
                 [sizes](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     if (wants(self.inputs[k])) {
                       Tensor g(self.inputs[k]->value.shape());
                       for (std::size_t i = 0; i < sizes[k]; ++i) g[i] = self.grad[off + i];
                       accumulate(*self.inputs[k], g);
                     }
                     off += sizes[k];
                   }
                 },
                 "concat_rows");
}

Var row(const Var& a, std::size_t r) {
  const std::size_t n = a.value().cols();
  const std::size_t m = a.value().rows();
  return make_op(a.value().row(r), {a},
                 [r, m, n](Node& self) {
                   Tensor g({m, n}, 0.0);
                   for (std::size_t j = 0; j < n; ++j) g[r * n + j] = self.grad[j];
                   accumulate(*self.inputs[0], g);
                 },
                 "row");
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  std::vector<double> v;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    sizes.push_back(p.value().size());
    v.insert(v.end(), p.value().values().begin(), p.value().values().end());
  }
  const std::size_t total = v.size();
  return make_op(Tensor({total}, std::move(v)), std::vector<Var>(parts.begin(), parts.end()),
                 [sizes](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                     if (wants(self.inputs[k])) {
                       Tensor g(self.inputs[k]->value.shape());
                       for (std::size_t i = 0; i < sizes[k]; ++i) g[i] = self.grad[off + i];
                       accumulate(*self.inputs[k], g);
                     }
                     off += sizes[k];
                   }
                 },
                 "concat");
}

Var reshape(const Var& a, Shape shape) {
  return make_op(a.value().reshaped(std::move(shape)), {a},
                 [](Node& self) {
                   accumulate(*self.inputs[0], self.grad.reshaped(self.inputs[0]->value.shape()));
                 },
                 "reshape");
}

Var l2_normalize(const Var& v) {
  const double n = l2_norm(v.value().values());
  if (n == 0.0) throw DegenerateInputError("l2_normalize: zero-norm vector");
  Tensor out = v.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= n;
  return make_op(std::move(out), {v},
                 [n](Node& self) {
                   const double yg = dot(self.value.values(), self.grad.values());
                   Tensor g = self.grad;
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - self.value[i] * yg) / n;
                   accumulate(*self.inputs[0], g);
                 },
                 "l2_normalize");
}

Var normalize_cols(const Var& w) {
  const Tensor& v = w.value();
  if (v.rank() != 2) throw DimensionError("normalize_cols expects a matrix");
  const std::size_t m = v.rows(), n = v.cols();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += v(i, j) * v(i, j);
  for (std::size_t j = 0; j < n; ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (norms[j] == 0.0) {
      throw DegenerateInputError("normalize_cols: column " + std::to_string(j) + " has zero norm");
    }
  }
  Tensor out = v;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= norms[j];
  return make_op(std::move(out), {w},
                 [m, n, norms = std::move(norms)](Node& self) {
                   Tensor g({m, n});
                   for (std::size_t j = 0; j < n; ++j) {
                     double yg = 0.0;
                     for (std::size_t i = 0; i < m; ++i) yg += self.value(i, j) * self.grad(i, j);
                     for (std::size_t i = 0; i < m; ++i)
                       g(i, j) = (self.grad(i, j) - self.value(i, j) * yg) / norms[j];
                   }
                   accumulate(*self.inputs[0], g);
                 },
                 "normalize_cols");
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "dot");
  return make_op(Tensor({1}, dot(a.value().values(), b.value().values())), {a, b},
                 [](Node& self) {
                   const double g0 = self.grad[0];
                   auto& A = self.inputs[0];
                   auto& B = self.inputs[1];
                   if (wants(A)) {
                     Tensor g = B->value;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] *= g0;
                     accumulate(*A, g);
                   }
                   if (wants(B)) {
                     Tensor g = A->value;
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] *= g0;
                     accumulate(*B, g);
                   }
                 },
                 "dot");
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return make_op(Tensor({1}, s), {a},
                 [](Node& self) {
                   accumulate(*self.inputs[0], Tensor(self.inputs[0]->value.shape(), self.grad[0]));
                 },
                 "sum");
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

}  // namespace drl
