// SPDX-License-Identifier: Apache-2.0
//
// Fake quantization with straight-through data gradients and learned step
// sizes. A quantizer maps x -> round(clamp(x / s, b_l, b_u)) * s with
// symmetric integer bounds b_l = -2^(p-1), b_u = 2^(p-1) - 1. Rounding is
// half-to-even (the default FE_TONEAREST mode of nearbyint).
#pragma once

#include <cfenv>
#include <cmath>
#include <cstdint>
#include <vector>

#include "silq/autodiff.hpp"
#include "silq/error.hpp"
#include "silq/tensor.hpp"

namespace silq {

/// Smallest admissible step size. Scales are clamped here rather than
/// allowed to collapse to zero.
inline constexpr float kScaleFloor = 1e-8f;

enum class Granularity {
  kPerTensor,   // one scale for the whole tensor
  kPerChannel,  // one scale per row (weights are stored [out x in])
  kPerToken,    // one scale per row, recomputed from data every call
};

struct QuantizerSpec {
  int bits = 8;
  Granularity granularity = Granularity::kPerTensor;
  bool grad_scale = true;  // scale step gradients by 1/sqrt(N * b_u)
};

inline void check_bits(int bits) {
  check_input(bits == 2 || bits == 4 || bits == 8 || bits == 16,
              "quantizer bits must be one of 2, 4, 8, 16");
}

inline float lower_bound(int bits) {
  return -static_cast<float>(1 << (bits - 1));
}

inline float upper_bound(int bits) {
  return static_cast<float>((1 << (bits - 1)) - 1);
}

namespace detail {

/// Number of scales a spec requires for a given tensor.
inline std::size_t scale_count(const Tensor& x, Granularity g) {
  return g == Granularity::kPerTensor ? 1 : x.rows();
}

/// Elements sharing one scale.
inline std::size_t group_size(const Tensor& x, Granularity g) {
  return g == Granularity::kPerTensor ? x.numel() : x.cols();
}

inline void check_scales(const Tensor& x, const Tensor& scales,
                         const QuantizerSpec& spec) {
  check_bits(spec.bits);
  check_shape(scales.numel() == scale_count(x, spec.granularity),
              "quantize: scale count does not match granularity");
  for (std::size_t i = 0; i < scales.numel(); ++i)
    check_input(scales[i] > 0.0f && std::isfinite(scales[i]),
                "quantize: scales must be positive and finite");
}

}  // namespace detail

inline float fake_quant_scalar(float x, float s, float b_l, float b_u) {
  float v = x / s;
  v = v < b_l ? b_l : (v > b_u ? b_u : v);
  return std::nearbyint(v) * s;
}

/// Forward fake quantization. `scales` holds one value (per-tensor) or one
/// value per row (per-channel and per-token share this layout).
inline Tensor quantize_fake(const Tensor& x, const Tensor& scales,
                            const QuantizerSpec& spec) {
  detail::check_scales(x, scales, spec);
  const float b_l = lower_bound(spec.bits);
  const float b_u = upper_bound(spec.bits);
  Tensor out(x.shape());
  if (spec.granularity == Granularity::kPerTensor) {
    const float s = scales[0];
    for (std::size_t i = 0; i < x.numel(); ++i)
      out[i] = fake_quant_scalar(x[i], s, b_l, b_u);
  } else {
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t i = 0; i < rows; ++i) {
      const float s = scales[i];
      for (std::size_t j = 0; j < cols; ++j)
        out[i * cols + j] = fake_quant_scalar(x[i * cols + j], s, b_l, b_u);
    }
  }
  return out;
}

/// Integer codes for export: round(clamp(x / s)). Same clamp-then-round path
/// as the fake-quant forward so dequantized codes reproduce it exactly.
inline std::vector<std::int32_t> quantize_codes(const Tensor& x,
                                                const Tensor& scales,
                                                const QuantizerSpec& spec) {
  detail::check_scales(x, scales, spec);
  const float b_l = lower_bound(spec.bits);
  const float b_u = upper_bound(spec.bits);
  std::vector<std::int32_t> codes(x.numel());
  const std::size_t cols =
      spec.granularity == Granularity::kPerTensor ? x.numel() : x.cols();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float s = scales[spec.granularity == Granularity::kPerTensor
                               ? 0
                               : i / cols];
    float v = x[i] / s;
    v = v < b_l ? b_l : (v > b_u ? b_u : v);
    codes[i] = static_cast<std::int32_t>(std::nearbyint(v));
  }
  return codes;
}

/// Straight-through data gradient: pass upstream gradient where x / s lies
/// inside [b_l, b_u] (inclusive), zero where clipped.
inline Tensor backward_ste(const Tensor& x, const Tensor& scales,
                           const QuantizerSpec& spec, const Tensor& grad_out) {
  detail::check_scales(x, scales, spec);
  check_shape(x.same_shape(grad_out), "backward_ste: gradient shape mismatch");
  const float b_l = lower_bound(spec.bits);
  const float b_u = upper_bound(spec.bits);
  Tensor gx = Tensor::zeros(x.shape());
  const std::size_t cols =
      spec.granularity == Granularity::kPerTensor ? x.numel() : x.cols();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float s = scales[spec.granularity == Granularity::kPerTensor
                               ? 0
                               : i / cols];
    const float v = x[i] / s;
    if (v >= b_l && v <= b_u) gx[i] = grad_out[i];
  }
  return gx;
}

/// Step-size gradient, one entry per scale. Per element:
///   below range: b_l,  above range: b_u,  in range: round(v) - v
/// each weighted by the upstream gradient and summed over the group. With
/// spec.grad_scale the sum is multiplied by 1 / sqrt(group_size * b_u).
inline Tensor backward_lsq_step(const Tensor& x, const Tensor& scales,
                                const QuantizerSpec& spec,
                                const Tensor& grad_out) {
  detail::check_scales(x, scales, spec);
  check_shape(x.same_shape(grad_out),
              "backward_lsq_step: gradient shape mismatch");
  const float b_l = lower_bound(spec.bits);
  const float b_u = upper_bound(spec.bits);
  const std::size_t n_scales = scales.numel();
  const std::size_t group = detail::group_size(x, spec.granularity);
  Tensor gs = Tensor::zeros(scales.shape());
  for (std::size_t g = 0; g < n_scales; ++g) {
    const float s = scales[g];
    double acc = 0.0;
    for (std::size_t j = 0; j < group; ++j) {
      const std::size_t i = g * group + j;
      const float v = x[i] / s;
      float term;
      if (v < b_l)
        term = b_l;
      else if (v > b_u)
        term = b_u;
      else
        term = std::nearbyint(v) - v;
      acc += static_cast<double>(term) * grad_out[i];
    }
    if (spec.grad_scale)
      acc /= std::sqrt(static_cast<double>(group) * b_u);
    gs[g] = static_cast<float>(acc);
  }
  return gs;
}

/// Per-row dynamic scale: s_i = max(max|x_i| / b_u, floor). Used for
/// activations and cache tensors quantized on the fly; the scale is treated
/// as a constant in the backward pass.
inline Tensor compute_dynamic_scale(const Tensor& x, int bits) {
  check_bits(bits);
  check_shape(x.rank() == 2, "compute_dynamic_scale expects [tokens x d]");
  const float b_u = upper_bound(bits);
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor s({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    float mx = 0.0f;
    for (std::size_t j = 0; j < cols; ++j)
      mx = std::max(mx, std::fabs(x[i * cols + j]));
    s[i] = std::max(mx / b_u, kScaleFloor);
  }
  return s;
}

// ---------------------------------------------------------------------------
// int4 packing: two two's-complement nibbles per byte, first value in the
// low nibble. Odd-length input pads the final high nibble with zero.
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> pack_int4(const std::vector<std::int8_t>& v) {
  for (std::int8_t x : v)
    check_input(x >= -8 && x <= 7, "pack_int4: value outside [-8, 7]");
  std::vector<std::uint8_t> out((v.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint8_t nib = static_cast<std::uint8_t>(v[i]) & 0x0F;
    if (i % 2 == 0)
      out[i / 2] |= nib;
    else
      out[i / 2] |= static_cast<std::uint8_t>(nib << 4);
  }
  return out;
}

inline std::vector<std::int8_t> unpack_int4(
    const std::vector<std::uint8_t>& bytes, std::size_t count) {
  check_input(count <= bytes.size() * 2, "unpack_int4: count exceeds data");
  std::vector<std::int8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint8_t nib = i % 2 == 0 ? (bytes[i / 2] & 0x0F) : (bytes[i / 2] >> 4);
    out[i] = static_cast<std::int8_t>(nib >= 8 ? static_cast<int>(nib) - 16
                                               : static_cast<int>(nib));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------

/// Fake quantization with a learned step size. Data gradient is the
/// straight-through estimator; step gradient is the learned-step rule above.
inline Value fake_quant(const Value& x, const Value& step,
                        const QuantizerSpec& spec) {
  Tape& tape = *x.tape;
  Tensor out = quantize_fake(x.tensor(), step.tensor(), spec);
  const std::size_t xi = x.idx, si = step.idx, oi = tape.next_index();
  return tape.emit(
      "fake_quant", std::move(out), {xi, si},
      [xi, si, oi, spec](BackwardContext& ctx) {
        const Tensor& go = ctx.grad(oi);
        const Tensor& vx = ctx.val(xi);
        const Tensor& vs = ctx.val(si);
        if (ctx.needs(xi))
          detail::accumulate(ctx.grad(xi), backward_ste(vx, vs, spec, go));
        if (ctx.needs(si))
          detail::accumulate(ctx.grad(si),
                             backward_lsq_step(vx, vs, spec, go));
      });
}

/// Fake quantization with a per-row scale recomputed from the input. The
/// scale is detached: gradients flow through the straight-through path only.
inline Value fake_quant_dynamic(const Value& x, int bits) {
  Tape& tape = *x.tape;
  Tensor scales = compute_dynamic_scale(x.tensor(), bits);
  QuantizerSpec spec{bits, Granularity::kPerToken, false};
  Tensor out = quantize_fake(x.tensor(), scales, spec);
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("fake_quant_dynamic", std::move(out), {xi},
                   [xi, oi, spec, scales](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     const Tensor& vx = ctx.val(xi);
                     detail::accumulate(ctx.grad(xi),
                                        backward_ste(vx, scales, spec, go));
                   });
}

}  // namespace silq
