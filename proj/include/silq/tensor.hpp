// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "silq/error.hpp"
#include "silq/rng.hpp"

namespace silq {

/// Dense row-major float32 tensor. Element count always equals the product
/// of the shape; rank 0 is disallowed (scalars are shape {1}).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(data_.size() == checked_numel(shape_),
                "tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, float value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng,
                      float mean = 0.0f, float stddev = 1.0f) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.normal_f(mean, stddev);
    return t;
  }

  static Tensor rand_uniform(std::vector<std::size_t> shape, Rng& rng,
                             float lo, float hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform_f(lo, hi);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Rows/cols of a rank-2 tensor.
  std::size_t rows() const {
    check_shape(rank() == 2, "rows() requires a rank-2 tensor");
    return shape_[0];
  }
  std::size_t cols() const {
    check_shape(rank() == 2, "cols() requires a rank-2 tensor");
    return shape_[1];
  }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  float max_abs() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    check_shape(!shape.empty(), "tensor shape must have at least one dim");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      check_shape(d > 0, "tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

/// C = A * B for rank-2 tensors, [m x k] * [k x n] -> [m x n].
/// Plain float accumulation, ikj loop order; each output element is produced
/// by exactly one thread so results are bit-identical at any thread count.
inline Tensor matmul_tensor(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul requires rank-2 inputs");
  check_shape(a.cols() == b.rows(), "matmul inner dimensions differ: " +
                                        a.shape_str() + " vs " + b.shape_str());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
#pragma omp parallel for schedule(static) if (m * n * k > (1u << 16))
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    float* crow = pc + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = pa[i * k + kk];
      const float* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// C = A^T * B, A [k x m], B [k x n] -> [m x n]. Used by matmul backward.
inline Tensor matmul_at_b(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul requires rank-2 inputs");
  check_shape(a.rows() == b.rows(), "matmul_at_b dimension mismatch");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
#pragma omp parallel for schedule(static) if (m * n * k > (1u << 16))
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    float* crow = pc + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = pa[kk * m + i];
      const float* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// C = A * B^T, A [m x k], B [n x k] -> [m x n].
inline Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul requires rank-2 inputs");
  check_shape(a.cols() == b.cols(), "matmul_a_bt dimension mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
#pragma omp parallel for schedule(static) if (m * n * k > (1u << 16))
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const float* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = pb + j * k;
      float acc = 0.0f;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  check_shape(a.rank() == 2, "transpose requires a rank-2 tensor");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline float frobenius_norm(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.vec()) acc += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(acc));
}

inline float frobenius_distance(const Tensor& a, const Tensor& b) {
  check_shape(a.same_shape(b), "frobenius_distance shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return static_cast<float>(std::sqrt(acc));
}

}  // namespace silq
