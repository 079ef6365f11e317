#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cubevit {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Derives an independent stream seed from (base, index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Dense row-major tensor of doubles. Every extent is positive and
/// data().size() == product of extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, value); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  // 2-D helpers; throw ShapeError on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }

  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  double item() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain forward kernels (no gradient tracking).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Shift-stable softmax along `axis` (row max subtracted before exp).
Tensor softmax(const Tensor& x, std::size_t axis);

/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
double gelu(double x);

/// Normalizes each row (last axis) to zero mean and unit population variance,
/// then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

/// Throws DegenerateInputError if either vector is all zeros.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace cubevit
