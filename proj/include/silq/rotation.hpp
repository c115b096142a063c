// SPDX-License-Identifier: Apache-2.0
//
// Rotation decomposition of weight changes. For a weight pair (W0, W1) the
// orthogonal Procrustes distance d_p = min_R ||R W0 - W1||_F over rotation
// matrices splits the total Frobenius change d_f into a rotational part
// (d_f - d_p) and a non-rotational part (d_p), both normalized by ||W0||_F.
// Rotations are fit on the left and the right and the smaller residual
// wins. All linear algebra here runs in double regardless of tensor width;
// the SVD is a one-sided Jacobi, accurate and compact at these sizes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "silq/error.hpp"
#include "silq/model.hpp"
#include "silq/tensor.hpp"

namespace silq {

// ---------------------------------------------------------------------------
// Small dense double matrices
// ---------------------------------------------------------------------------

struct DMat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  DMat() = default;
  DMat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  static DMat identity(std::size_t n) {
    DMat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  static DMat from_tensor(const Tensor& t) {
    check_shape(t.rank() == 2, "DMat: tensor must be rank-2");
    DMat m(t.rows(), t.cols());
    for (std::size_t i = 0; i < m.a.size(); ++i) m.a[i] = t.data()[i];
    return m;
  }
};

inline DMat dmat_mul(const DMat& x, const DMat& y) {
  check_shape(x.cols == y.rows, "dmat_mul: inner dimensions differ");
  DMat out(x.rows, y.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double xv = x.at(i, k);
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < y.cols; ++j)
        out.at(i, j) += xv * y.at(k, j);
    }
  return out;
}

inline DMat dmat_transpose(const DMat& x) {
  DMat out(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

inline double dmat_frob(const DMat& x) {
  double s = 0.0;
  for (double v : x.a) s += v * v;
  return std::sqrt(s);
}

/// Determinant by LU with partial pivoting. Destroys a local copy.
inline double dmat_det(DMat m) {
  check_shape(m.rows == m.cols, "dmat_det: matrix must be square");
  const std::size_t n = m.rows;
  double det = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::fabs(m.at(i, k)) > std::fabs(m.at(piv, k))) piv = i;
    if (m.at(piv, k) == 0.0) return 0.0;
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j)
        std::swap(m.at(piv, j), m.at(k, j));
      det = -det;
    }
    det *= m.at(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = m.at(i, k) / m.at(k, k);
      for (std::size_t j = k; j < n; ++j) m.at(i, j) -= f * m.at(k, j);
    }
  }
  return det;
}

// ---------------------------------------------------------------------------
// One-sided Jacobi SVD
// ---------------------------------------------------------------------------

struct Svd {
  DMat u;                 // left singular vectors, columns
  std::vector<double> s;  // singular values, descending
  DMat v;                 // right singular vectors, columns
};

/// SVD of a square matrix: M = U diag(s) V^T. Column pairs of G = M V are
/// rotated until mutually orthogonal; zero columns of a rank-deficient input
/// get their U directions from Gram-Schmidt against the basis.
inline Svd jacobi_svd(const DMat& m) {
  check_shape(m.rows == m.cols, "jacobi_svd: matrix must be square");
  const std::size_t n = m.rows;
  DMat g = m;
  DMat v = DMat::identity(n);

  const double tol = 1e-14;
  for (int sweep = 0; sweep < 64; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          app += g.at(i, p) * g.at(i, p);
          aqq += g.at(i, q) * g.at(i, q);
          apq += g.at(i, p) * g.at(i, q);
        }
        if (std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
        rotated = true;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double gp = g.at(i, p), gq = g.at(i, q);
          g.at(i, p) = c * gp - s * gq;
          g.at(i, q) = s * gp + c * gq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) s2 += g.at(i, j) * g.at(i, j);
    sigma[j] = std::sqrt(s2);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sigma[a] > sigma[b];
  });

  Svd out;
  out.u = DMat(n, n);
  out.v = DMat(n, n);
  out.s.resize(n);
  double smax = 0.0;
  for (std::size_t j = 0; j < n; ++j) smax = std::max(smax, sigma[j]);
  const double dead = smax > 0.0 ? smax * 1e-12 : 0.0;
  std::size_t built = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.s[j] = sigma[src];
    for (std::size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
    if (sigma[src] > dead) {
      for (std::size_t i = 0; i < n; ++i)
        out.u.at(i, j) = g.at(i, src) / sigma[src];
      ++built;
    }
  }
  // Complete U for dead columns: best basis vector after projecting out the
  // columns already in place, re-orthogonalized twice for stability.
  for (std::size_t j = built; j < n; ++j) {
    std::vector<double> best(n, 0.0);
    double best_norm = -1.0;
    for (std::size_t cand = 0; cand < n; ++cand) {
      std::vector<double> w(n, 0.0);
      w[cand] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < j; ++c) {
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += w[i] * out.u.at(i, c);
          for (std::size_t i = 0; i < n; ++i) w[i] -= dot * out.u.at(i, c);
        }
      }
      double nrm = 0.0;
      for (double x : w) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > best_norm) {
        best_norm = nrm;
        best = w;
      }
    }
    check_input(best_norm > 0.0, "jacobi_svd: basis completion failed");
    for (std::size_t i = 0; i < n; ++i) out.u.at(i, j) = best[i] / best_norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orthogonal Procrustes
// ---------------------------------------------------------------------------

enum class Side { kLeft, kRight };

inline const char* side_name(Side s) {
  return s == Side::kLeft ? "left" : "right";
}

struct ProcrustesSolution {
  DMat r;           // rows x rows (left) or cols x cols (right)
  double residual;  // d_p
  Side side;
};

/// Best rotation aligning A to B: min_R ||R A - B||_F (left) or
/// ||A R - B||_F (right). R comes from the SVD of the cross-covariance
/// (B A^T left, A^T B right) as U V^T; unless reflections are allowed, a
/// negative determinant is repaired by flipping the column of U that
/// carries the smallest singular value.
inline ProcrustesSolution procrustes(const Tensor& a, const Tensor& b,
                                     Side side,
                                     bool allow_reflection = false) {
  check_shape(a.rank() == 2 && a.same_shape(b),
              "procrustes: matrices must be rank-2 and the same shape");
  const DMat da = DMat::from_tensor(a);
  const DMat db = DMat::from_tensor(b);
  const DMat cross = side == Side::kLeft
                         ? dmat_mul(db, dmat_transpose(da))
                         : dmat_mul(dmat_transpose(da), db);
  Svd svd = jacobi_svd(cross);
  const std::size_t n = cross.rows;

  DMat r = dmat_mul(svd.u, dmat_transpose(svd.v));
  if (!allow_reflection && dmat_det(r) < 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      svd.u.at(i, n - 1) = -svd.u.at(i, n - 1);
    r = dmat_mul(svd.u, dmat_transpose(svd.v));
  }

  const DMat fit =
      side == Side::kLeft ? dmat_mul(r, da) : dmat_mul(da, r);
  double res = 0.0;
  for (std::size_t i = 0; i < fit.a.size(); ++i) {
    const double d = fit.a[i] - db.a[i];
    res += d * d;
  }
  return {std::move(r), std::sqrt(res), side};
}

// ---------------------------------------------------------------------------
// Weight-change decomposition
// ---------------------------------------------------------------------------

struct RotationEntry {
  std::string layer;
  std::string type;
  Side side = Side::kLeft;
  double rot = 0.0;
  double non_rot = 0.0;
  bool skipped = false;
  std::string warning;
};

/// Map a parameter name onto its layer type for the per-type averages.
inline std::string layer_type(const std::string& name) {
  const std::size_t dot = name.rfind('.');
  const std::string member =
      dot == std::string::npos ? name : name.substr(dot + 1);
  if (name == "head.weight") return "head";
  if (member == "wq") return "q_proj";
  if (member == "wk") return "k_proj";
  if (member == "wv") return "v_proj";
  if (member == "wo") return "o_proj";
  if (member == "w_gate") return "gate_proj";
  if (member == "w_up") return "up_proj";
  if (member == "w_down") return "down_proj";
  return "unmapped";
}

/// Split one weight change into rotational and non-rotational parts. Both
/// sides are fit and the smaller residual is kept. A zero-norm W0 cannot be
/// normalized; the entry comes back marked skipped with a warning instead.
inline RotationEntry decompose(const std::string& name, const Tensor& w0,
                               const Tensor& w1,
                               bool allow_reflection = false) {
  check_shape(w0.rank() == 2 && w0.same_shape(w1),
              "decompose: weight pair must be rank-2 and the same shape");
  RotationEntry e;
  e.layer = name;
  e.type = layer_type(name);
  const double norm0 = frobenius_norm(w0);
  if (norm0 == 0.0) {
    e.skipped = true;
    e.warning = "zero-norm original weight; skipped";
    return e;
  }
  const ProcrustesSolution left =
      procrustes(w0, w1, Side::kLeft, allow_reflection);
  const ProcrustesSolution right =
      procrustes(w0, w1, Side::kRight, allow_reflection);
  const ProcrustesSolution& best =
      left.residual <= right.residual ? left : right;
  const double d_f = frobenius_distance(w0, w1);
  e.side = best.side;
  e.non_rot = best.residual / norm0;
  e.rot = (d_f - best.residual) / norm0;
  return e;
}

/// Decompose every quantized linear weight shared by two models of the same
/// architecture, in site order.
inline std::vector<RotationEntry> decompose_model_weights(
    QuantizedModel& before, QuantizedModel& after,
    bool allow_reflection = false) {
  check_input(before.config.d_model == after.config.d_model &&
                  before.config.n_layers == after.config.n_layers &&
                  before.config.d_ff == after.config.d_ff &&
                  before.config.vocab_size == after.config.vocab_size,
              "decompose_model_weights: model shapes differ");
  std::vector<RotationEntry> entries;
  for (const SiteInfo& s : quantizer_sites(after.config, after.plan)) {
    if (s.kind != SiteKind::kWeight) continue;
    entries.push_back(decompose(s.name, before.weight_by_site(s.name),
                                after.weight_by_site(s.name),
                                allow_reflection));
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct TypeAverage {
  std::string type;
  double rot = 0.0;
  double non_rot = 0.0;
  std::size_t count = 0;
};

struct RotationReport {
  std::vector<RotationEntry> entries;
  std::vector<TypeAverage> averages;
  bool excluded_double_rotated = false;
};

/// Mean rot/non_rot per layer type. With the exclusion flag set, sites that
/// a two-sided rotation scheme rotates on both sides (v_proj and o_proj)
/// are dropped from the averages, since one-sided Procrustes cannot see
/// those rotations. Skipped entries never contribute.
inline RotationReport aggregate_report(
    const std::vector<RotationEntry>& entries, bool exclude_double_rotated) {
  check_input(!entries.empty(), "aggregate_report: no entries");
  RotationReport report;
  report.entries = entries;
  report.excluded_double_rotated = exclude_double_rotated;
  std::vector<TypeAverage> avg;
  for (const RotationEntry& e : entries) {
    if (e.skipped) continue;
    if (exclude_double_rotated && (e.type == "v_proj" || e.type == "o_proj"))
      continue;
    auto it = std::find_if(avg.begin(), avg.end(), [&](const TypeAverage& t) {
      return t.type == e.type;
    });
    if (it == avg.end()) {
      avg.push_back({e.type, e.rot, e.non_rot, 1});
    } else {
      it->rot += e.rot;
      it->non_rot += e.non_rot;
      it->count += 1;
    }
  }
  for (TypeAverage& t : avg) {
    t.rot /= static_cast<double>(t.count);
    t.non_rot /= static_cast<double>(t.count);
  }
  std::sort(avg.begin(), avg.end(),
            [](const TypeAverage& a, const TypeAverage& b) {
              return a.type < b.type;
            });
  report.averages = std::move(avg);
  return report;
}

/// Tab-delimited report: one row per layer, then one mean row per type.
inline void write_rotation_report(std::ostream& os,
                                  const RotationReport& report) {
  os << "layer\ttype\tside\trot\tnon_rot\n";
  os << std::setprecision(9);
  for (const RotationEntry& e : report.entries) {
    if (e.skipped) {
      os << e.layer << "\t" << e.type << "\t-\tskipped\tskipped\n";
      continue;
    }
    os << e.layer << "\t" << e.type << "\t" << side_name(e.side) << "\t"
       << e.rot << "\t" << e.non_rot << "\n";
  }
  for (const TypeAverage& t : report.averages)
    os << "(mean)\t" << t.type << "\t-\t" << t.rot << "\t" << t.non_rot
       << "\n";
}

}  // namespace silq
