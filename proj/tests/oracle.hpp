// SPDX-License-Identifier: Apache-2.0
//
// Double-precision reference implementations used as test oracles. These are
// written as straight loops, independent of the library code under test, so
// agreement is evidence rather than tautology. Finite differences are taken
// on these references: float-level FD would drown the tolerances in rounding
// noise.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "silq/rng.hpp"
#include "silq/tensor.hpp"

namespace oracle {

using dvec = std::vector<double>;

inline dvec to_dvec(const silq::Tensor& t) {
  dvec out(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = t[i];
  return out;
}

// --- reference ops (row-major, explicit dims) ------------------------------

inline dvec ref_matmul(const dvec& a, const dvec& b, std::size_t m,
                       std::size_t k, std::size_t n) {
  dvec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

inline dvec ref_linear(const dvec& x, const dvec& w, std::size_t n,
                       std::size_t in, std::size_t out) {
  dvec y(n * out, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t p = 0; p < in; ++p) acc += x[i * in + p] * w[o * in + p];
      y[i * out + o] = acc;
    }
  return y;
}

inline dvec ref_silu(const dvec& x) {
  dvec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] / (1.0 + std::exp(-x[i]));
  return y;
}

inline dvec ref_softmax_rows(const dvec& x, std::size_t n, std::size_t d) {
  dvec y(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x[i * d];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[i * d + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      y[i * d + j] = std::exp(x[i * d + j] - mx);
      denom += y[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] /= denom;
  }
  return y;
}

inline dvec ref_rmsnorm(const dvec& x, const dvec& gain, std::size_t n,
                        std::size_t d, double eps) {
  dvec y(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += x[i * d + j] * x[i * d + j];
    const double inv = 1.0 / std::sqrt(ms / d + eps);
    for (std::size_t j = 0; j < d; ++j)
      y[i * d + j] = x[i * d + j] * inv * gain[j];
  }
  return y;
}

inline double ref_cross_entropy_soft(const dvec& logits, const dvec& targets,
                                     std::size_t n, std::size_t v,
                                     const dvec& row_weights = {}) {
  double loss = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = row_weights.empty() ? 1.0 : row_weights[i];
    if (w == 0.0) continue;
    double mx = logits[i * v];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, logits[i * v + j]);
    double denom = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      denom += std::exp(logits[i * v + j] - mx);
      dot += targets[i * v + j] * (logits[i * v + j] - mx);
    }
    loss += w * (std::log(denom) - dot);
    wsum += w;
  }
  return loss / wsum;
}

inline dvec ref_rope(const dvec& x, std::size_t n, std::size_t d,
                     std::size_t pos0, double base) {
  dvec y(x.size());
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double a =
          static_cast<double>(pos0 + i) *
          std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
      const double c = std::cos(a), s = std::sin(a);
      const double x0 = x[i * d + 2 * k], x1 = x[i * d + 2 * k + 1];
      y[i * d + 2 * k] = x0 * c - x1 * s;
      y[i * d + 2 * k + 1] = x0 * s + x1 * c;
    }
  return y;
}

// --- finite differences -----------------------------------------------------

/// Central-difference gradient of a scalar function of a flat vector.
inline dvec fd_grad(const std::function<double(const dvec&)>& f, dvec x,
                    double h = 1e-6) {
  dvec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    const double step = h * std::max(1.0, std::fabs(keep));
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double dn = f(x);
    x[i] = keep;
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

/// Mixed absolute/relative agreement check.
inline bool close(double a, double b, double atol, double rtol) {
  return std::fabs(a - b) <= atol + rtol * std::max(std::fabs(a), std::fabs(b));
}

inline double max_grad_error(const silq::Tensor& got, const dvec& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.numel(); ++i) {
    const double denom = std::max(1.0, std::fabs(want[i]));
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

// --- small square-matrix helpers for rotation oracles ----------------------

inline dvec matmul_nn(const dvec& a, const dvec& b, std::size_t n) {
  return ref_matmul(a, b, n, n, n);
}

inline double det_nn(dvec m, std::size_t n) {
  double det = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::fabs(m[i * n + k]) > std::fabs(m[piv * n + k])) piv = i;
    if (m[piv * n + k] == 0.0) return 0.0;
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j)
        std::swap(m[piv * n + j], m[k * n + j]);
      det = -det;
    }
    det *= m[k * n + k];
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = m[i * n + k] / m[k * n + k];
      for (std::size_t j = k; j < n; ++j) m[i * n + j] -= f * m[k * n + j];
    }
  }
  return det;
}

/// Haar-ish random special-orthogonal matrix: Gram-Schmidt on a Gaussian
/// draw, then a column sign flip if the determinant came out negative.
inline dvec random_rotation(std::size_t n, silq::Rng& rng) {
  dvec q(n * n);
  for (double& v : q) v = rng.normal();
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        dot += q[i * n + c] * q[i * n + prev];
      for (std::size_t i = 0; i < n; ++i)
        q[i * n + c] -= dot * q[i * n + prev];
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q[i * n + c] * q[i * n + c];
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q[i * n + c] /= nrm;
  }
  if (det_nn(q, n) < 0.0)
    for (std::size_t i = 0; i < n; ++i) q[i * n] = -q[i * n];
  return q;
}

/// exp(Omega) for skew-symmetric Omega by plain Taylor series; exactly
/// orthogonal with determinant +1 up to roundoff, so it gives feasible
/// rotations without touching any SVD.
inline dvec expm_skew(const dvec& omega, std::size_t n) {
  dvec r(n * n, 0.0), term(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    r[i * n + i] = 1.0;
    term[i * n + i] = 1.0;
  }
  for (int k = 1; k <= 24; ++k) {
    term = matmul_nn(term, omega, n);
    for (double& v : term) v /= double(k);
    for (std::size_t i = 0; i < n * n; ++i) r[i] += term[i];
  }
  return r;
}

}  // namespace oracle
