// SPDX-License-Identifier: Apache-2.0
//
// Step-size calibration. Four estimators cover the workflow:
//   calibrate_mse        convex expected-error minimization for weights
//   calibrate_percentile clipped-percentile rule for activation pools
//   calibrate_max        plain absolute maximum
//   calibrate_lsq_init   mean-based initializer for learned step sizes
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "silq/error.hpp"
#include "silq/golden_section.hpp"
#include "silq/quant.hpp"
#include "silq/tensor.hpp"

namespace silq {

/// Expected quantization error for one scale over a group of weights:
///   sum_i max(s^2 / 12, H(|w_i| - s*b) * (|w_i| - s*b)^2),  b = 2^(p-1) - 0.5
/// The first term is uniform rounding noise, the second squared clipping
/// error; each element contributes whichever is larger. Convex in s.
inline double mse_objective(const float* w, std::size_t n, double s,
                            double b) {
  const double noise = s * s / 12.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = std::fabs(static_cast<double>(w[i]));
    const double over = a - s * b;
    const double clip = over > 0.0 ? over * over : 0.0;
    acc += std::max(noise, clip);
  }
  return acc;
}

/// Minimize mse_objective for one group by golden-section search over
/// [kScaleFloor, max|w| / b]. All-zero groups return the scale floor.
inline float calibrate_mse_scalar(const float* w, std::size_t n, int bits) {
  check_bits(bits);
  const double b = static_cast<double>(1 << (bits - 1)) - 0.5;
  double amax = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    amax = std::max(amax, std::fabs(static_cast<double>(w[i])));
  const double hi = amax / b;
  if (hi <= kScaleFloor) return kScaleFloor;
  const double s = golden_section_minimize(
      [w, n, b](double cand) { return mse_objective(w, n, cand, b); },
      kScaleFloor, hi, 1e-6);
  return static_cast<float>(s);
}

/// Per-output-channel scales for a [out x in] weight matrix.
inline Tensor calibrate_mse(const Tensor& weights, int bits) {
  check_shape(weights.rank() == 2, "calibrate_mse expects [out x in] weights");
  const std::size_t rows = weights.rows(), cols = weights.cols();
  Tensor s({rows});
  for (std::size_t i = 0; i < rows; ++i)
    s[i] = calibrate_mse_scalar(weights.data() + i * cols, cols, bits);
  return s;
}

namespace detail {

inline double percentile_for_bits(int bits) {
  switch (bits) {
    case 4:
      return 99.91;
    case 8:
      return 99.99;
    case 16:
      return 99.995;
    default:
      throw InputError("no percentile entry for this bit width");
  }
}

/// Linearly interpolated quantile of already-selected order statistics:
/// pos = pct/100 * (n-1), q = v[k] + frac * (v[k+1] - v[k]).
inline double interpolate_quantile(double vk, double vk1, double frac) {
  return vk + frac * (vk1 - vk);
}

}  // namespace detail

/// Clipped-percentile scale for a pool of activation samples. The magnitude
/// distribution is cut at a per-bit-width percentile and the cut value
/// becomes the top of the representable range: s = q / b_u. Setting
/// divide_by_bound false returns the raw cut value as the scale instead.
inline float calibrate_percentile(const std::vector<float>& samples, int bits,
                                  bool divide_by_bound = true) {
  const double pct = detail::percentile_for_bits(bits);
  check_input(samples.size() >= 1000,
              "calibrate_percentile needs at least 1000 samples");
  std::vector<float> mags(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    mags[i] = std::fabs(samples[i]);
  const std::size_t n = mags.size();
  const double pos = pct / 100.0 * static_cast<double>(n - 1);
  const std::size_t k = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(k);
  std::nth_element(mags.begin(), mags.begin() + k, mags.end());
  const double vk = mags[k];
  double vk1 = vk;
  if (k + 1 < n) {
    // Everything right of k is >= v[k] after nth_element; the (k+1)-th
    // order statistic is the minimum of that tail.
    vk1 = *std::min_element(mags.begin() + k + 1, mags.end());
  }
  const double q = detail::interpolate_quantile(vk, vk1, frac);
  const double s = divide_by_bound ? q / upper_bound(bits) : q;
  return std::max(static_cast<float>(s), kScaleFloor);
}

/// Absolute-maximum scale: s = max|x| / b_u.
inline float calibrate_max(const Tensor& x, int bits) {
  check_bits(bits);
  return std::max(x.max_abs() / upper_bound(bits), kScaleFloor);
}

/// Mean-based initializer for learned step sizes: s = 2 * mean|w| / sqrt(b_u).
inline float calibrate_lsq_init_scalar(const float* w, std::size_t n,
                                       int bits) {
  check_bits(bits);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    acc += std::fabs(static_cast<double>(w[i]));
  const double mean = n > 0 ? acc / static_cast<double>(n) : 0.0;
  const double s = 2.0 * mean / std::sqrt(static_cast<double>(upper_bound(bits)));
  return std::max(static_cast<float>(s), kScaleFloor);
}

/// Per-output-channel learned-step initializer for [out x in] weights.
inline Tensor calibrate_lsq_init(const Tensor& weights, int bits) {
  check_shape(weights.rank() == 2,
              "calibrate_lsq_init expects [out x in] weights");
  const std::size_t rows = weights.rows(), cols = weights.cols();
  Tensor s({rows});
  for (std::size_t i = 0; i < rows; ++i)
    s[i] = calibrate_lsq_init_scalar(weights.data() + i * cols, cols, bits);
  return s;
}

}  // namespace silq
