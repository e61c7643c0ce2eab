#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace drl {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Rank 1 holds vectors, rank 2 matrices,
// rank 3 stacks of matrices (per-head attention).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Matrix views. rows() of a rank-1 tensor is 1.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t r) const;
  void fill(double v);

  bool all_finite() const;
  // Byte-level equality, distinguishes -0.0 from 0.0.
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// FNV-1a over the raw bytes of shape and values.
std::uint64_t tensor_hash(const Tensor& t, std::uint64_t seed = 1469598103934665603ULL);
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Plain (non-differentiable) kernels. The differentiable ops in autograd.hpp
// are built on these.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
double cosine_similarity(std::span<const double> u, std::span<const double> v);
inline double cosine_similarity(const Tensor& u, const Tensor& v) {
  return cosine_similarity(u.values(), v.values());
}

// Throws NumericError naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, const char* what);

}  // namespace drl
