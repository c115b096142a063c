// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "oracle.hpp"
#include "silq/rotation.hpp"

using namespace silq;

namespace {

Tensor tensor_from(const oracle::dvec& v, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (std::size_t i = 0; i < r * c; ++i)
    t[i] = static_cast<float>(v[i]);
  return t;
}

double ortho_error(const DMat& r) {
  const DMat rtr = dmat_mul(dmat_transpose(r), r);
  double err = 0.0;
  for (std::size_t i = 0; i < r.rows; ++i)
    for (std::size_t j = 0; j < r.cols; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      const double d = rtr.at(i, j) - want;
      err += d * d;
    }
  return std::sqrt(err);
}

}  // namespace

TEST_CASE("jacobi svd reconstructs its input", "[rotation]") {
  Rng rng(17);
  for (std::size_t n : {3u, 8u, 16u}) {
    DMat m(n, n);
    for (double& v : m.a) v = rng.normal();
    Svd svd = jacobi_svd(m);
    // descending nonnegative singular values
    for (std::size_t j = 0; j + 1 < n; ++j) {
      REQUIRE(svd.s[j] >= svd.s[j + 1]);
      REQUIRE(svd.s[j + 1] >= 0.0);
    }
    REQUIRE(ortho_error(svd.u) < 1e-12);
    REQUIRE(ortho_error(svd.v) < 1e-12);
    // M == U diag(s) V^T
    DMat us = svd.u;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) us.at(i, j) *= svd.s[j];
    const DMat rec = dmat_mul(us, dmat_transpose(svd.v));
    double err = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
      err += (rec.a[i] - m.a[i]) * (rec.a[i] - m.a[i]);
      ref += m.a[i] * m.a[i];
    }
    REQUIRE(std::sqrt(err) < 1e-10 * std::sqrt(ref));
  }
}

TEST_CASE("jacobi svd handles rank deficiency", "[rotation]") {
  Rng rng(23);
  const std::size_t n = 8;
  // rank-1 outer product
  DMat m(n, n);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.normal();
    y[i] = rng.normal();
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.at(i, j) = x[i] * y[j];
  Svd svd = jacobi_svd(m);
  REQUIRE(svd.s[0] > 0.0);
  for (std::size_t j = 1; j < n; ++j) REQUIRE(svd.s[j] < 1e-10 * svd.s[0]);
  REQUIRE(ortho_error(svd.u) < 1e-10);  // completion must stay orthonormal
  REQUIRE(ortho_error(svd.v) < 1e-10);
}

TEST_CASE("procrustes on identical matrices returns the identity",
          "[rotation]") {
  Rng rng(5);
  Tensor a = Tensor::randn({8, 8}, rng);
  for (Side side : {Side::kLeft, Side::kRight}) {
    ProcrustesSolution sol = procrustes(a, a, side);
    REQUIRE(sol.residual <= 1e-9 * frobenius_norm(a));
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        REQUIRE(std::fabs(sol.r.at(i, j) - (i == j ? 1.0 : 0.0)) < 1e-9);
  }
}

TEST_CASE("procrustes recovers a planted rotation", "[rotation]") {
  Rng rng(7);
  const std::size_t n = 8, k = 12;
  oracle::dvec q = oracle::random_rotation(n, rng);

  SECTION("left side") {
    Tensor a = Tensor::randn({n, k}, rng);
    oracle::dvec ad = oracle::to_dvec(a);
    oracle::dvec bd = oracle::ref_matmul(q, ad, n, n, k);
    Tensor b = tensor_from(bd, n, k);
    ProcrustesSolution sol = procrustes(a, b, Side::kLeft);
    REQUIRE(sol.residual < 1e-6 * frobenius_norm(a));
    for (std::size_t i = 0; i < n * n; ++i)
      REQUIRE(std::fabs(sol.r.a[i] - q[i]) < 1e-4);
  }

  SECTION("right side") {
    Tensor a = Tensor::randn({k, n}, rng);
    oracle::dvec ad = oracle::to_dvec(a);
    oracle::dvec bd = oracle::ref_matmul(ad, q, k, n, n);
    Tensor b = tensor_from(bd, k, n);
    ProcrustesSolution sol = procrustes(a, b, Side::kRight);
    REQUIRE(sol.residual < 1e-6 * frobenius_norm(a));
    for (std::size_t i = 0; i < n * n; ++i)
      REQUIRE(std::fabs(sol.r.a[i] - q[i]) < 1e-4);
  }
}

TEST_CASE("no random rotation beats the procrustes residual", "[rotation]") {
  Rng rng(11);
  const std::size_t n = 8;
  Tensor a = Tensor::randn({n, n}, rng);
  Tensor b = Tensor::randn({n, n}, rng);
  ProcrustesSolution sol = procrustes(a, b, Side::kLeft);
  const oracle::dvec ad = oracle::to_dvec(a);
  const oracle::dvec bd = oracle::to_dvec(b);
  for (int trial = 0; trial < 10000; ++trial) {
    const oracle::dvec r = oracle::random_rotation(n, rng);
    const oracle::dvec ra = oracle::ref_matmul(r, ad, n, n, n);
    double res = 0.0;
    for (std::size_t i = 0; i < n * n; ++i)
      res += (ra[i] - bd[i]) * (ra[i] - bd[i]);
    REQUIRE(std::sqrt(res) >= sol.residual - 1e-9);
  }
}

TEST_CASE("procrustes solutions are special orthogonal", "[rotation]") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 4 + rng.index(10);
    const std::size_t c = 4 + rng.index(10);
    Tensor a = Tensor::randn({r, c}, rng);
    Tensor b = Tensor::randn({r, c}, rng);
    const Side side = trial % 2 == 0 ? Side::kLeft : Side::kRight;
    ProcrustesSolution sol = procrustes(a, b, side);
    REQUIRE(ortho_error(sol.r) < 1e-6);
    REQUIRE(std::fabs(dmat_det(sol.r) - 1.0) < 1e-6);
    // R = I is feasible, so the optimum cannot exceed the plain distance
    REQUIRE(sol.residual <= frobenius_distance(a, b) + 1e-9);

    // reflections can only improve the fit
    ProcrustesSolution refl = procrustes(a, b, side, true);
    REQUIRE(std::fabs(std::fabs(dmat_det(refl.r)) - 1.0) < 1e-6);
    REQUIRE(refl.residual <= sol.residual + 1e-9);
  }
}

TEST_CASE("left residual is invariant under a shared left rotation",
          "[rotation]") {
  Rng rng(19);
  const std::size_t n = 6, k = 9;
  Tensor a = Tensor::randn({n, k}, rng);
  Tensor b = Tensor::randn({n, k}, rng);
  const oracle::dvec q = oracle::random_rotation(n, rng);
  Tensor qa = tensor_from(
      oracle::ref_matmul(q, oracle::to_dvec(a), n, n, k), n, k);
  Tensor qb = tensor_from(
      oracle::ref_matmul(q, oracle::to_dvec(b), n, n, k), n, k);
  const double d0 = procrustes(a, b, Side::kLeft).residual;
  const double d1 = procrustes(qa, qb, Side::kLeft).residual;
  REQUIRE(std::fabs(d0 - d1) <= 1e-6 * (1.0 + d0));
}

TEST_CASE("procrustes rejects mismatched shapes", "[rotation]") {
  Rng rng(2);
  Tensor a = Tensor::randn({4, 5}, rng);
  Tensor b = Tensor::randn({5, 4}, rng);
  REQUIRE_THROWS_AS(procrustes(a, b, Side::kLeft), ShapeError);
  REQUIRE_THROWS_AS(decompose("x", a, b), ShapeError);
}

TEST_CASE("decompose splits pure rotations cleanly", "[rotation]") {
  Rng rng(29);
  const std::size_t n = 8;
  Tensor w0 = Tensor::randn({n, n}, rng);

  SECTION("no change at all") {
    RotationEntry e = decompose("layers.0.wq", w0, w0);
    REQUIRE_FALSE(e.skipped);
    REQUIRE(std::fabs(e.non_rot) < 1e-9);
    REQUIRE(std::fabs(e.rot) < 1e-9);
    REQUIRE(e.rot >= -1e-9);
  }

  SECTION("planted left rotation") {
    const oracle::dvec q = oracle::random_rotation(n, rng);
    Tensor w1 = tensor_from(
        oracle::ref_matmul(q, oracle::to_dvec(w0), n, n, n), n, n);
    RotationEntry e = decompose("layers.0.wq", w0, w1);
    REQUIRE(e.non_rot < 1e-6);
    const double want_rot = frobenius_distance(w0, w1) / frobenius_norm(w0);
    REQUIRE(std::fabs(e.rot - want_rot) < 1e-6);
    REQUIRE(e.side == Side::kLeft);
  }
}

TEST_CASE("planted rotation plus noise matches a linearized refit",
          "[rotation]") {
  Rng rng(31);
  const std::size_t n = 8;
  Tensor w0 = Tensor::randn({n, n}, rng);
  const oracle::dvec q = oracle::random_rotation(n, rng);
  oracle::dvec w1d = oracle::ref_matmul(q, oracle::to_dvec(w0), n, n, n);
  for (double& v : w1d) v += 0.02 * rng.normal();
  Tensor w1 = tensor_from(w1d, n, n);

  RotationEntry e = decompose("layers.0.wq", w0, w1);

  // Independent oracle: around the planted Q, solve the linear least
  // squares over skew generators, exponentiate back onto the rotation
  // manifold, and measure that feasible point's residual. The true optimum
  // can only be better, and for small noise only slightly.
  const oracle::dvec w0d = oracle::to_dvec(w0);
  // rows of q^T w1: q^T applied on the left
  oracle::dvec qt(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) qt[i * n + j] = q[j * n + i];
  const oracle::dvec target = oracle::ref_matmul(qt, oracle::to_dvec(w1), n, n, n);

  // gram matrix over pairs (p<q'): basis B_pq = e_p w0[q,:] - e_q w0[p,:]
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t s = p + 1; s < n; ++s) pairs.emplace_back(p, s);
  const std::size_t d = pairs.size();
  auto rowdot = [&](std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      acc += w0d[i * n + t] * w0d[j * n + t];
    return acc;
  };
  std::vector<double> gram(d * d, 0.0), rhs(d, 0.0);
  for (std::size_t a = 0; a < d; ++a) {
    const auto [p, s] = pairs[a];
    for (std::size_t b = 0; b < d; ++b) {
      const auto [r2, s2] = pairs[b];
      double v = 0.0;
      if (p == r2) v += rowdot(s, s2);
      if (p == s2) v -= rowdot(s, r2);
      if (s == r2) v -= rowdot(p, s2);
      if (s == s2) v += rowdot(p, r2);
      gram[a * d + b] = v;
    }
    double bacc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      bacc += w0d[s * n + t] * (target[p * n + t] - w0d[p * n + t]);
      bacc -= w0d[p * n + t] * (target[s * n + t] - w0d[s * n + t]);
    }
    rhs[a] = bacc;
  }
  // gaussian elimination
  for (std::size_t k2 = 0; k2 < d; ++k2) {
    std::size_t piv = k2;
    for (std::size_t i = k2 + 1; i < d; ++i)
      if (std::fabs(gram[i * d + k2]) > std::fabs(gram[piv * d + k2])) piv = i;
    for (std::size_t j = 0; j < d; ++j)
      std::swap(gram[piv * d + j], gram[k2 * d + j]);
    std::swap(rhs[piv], rhs[k2]);
    for (std::size_t i = k2 + 1; i < d; ++i) {
      const double f = gram[i * d + k2] / gram[k2 * d + k2];
      for (std::size_t j = k2; j < d; ++j) gram[i * d + j] -= f * gram[k2 * d + j];
      rhs[i] -= f * rhs[k2];
    }
  }
  std::vector<double> omega_c(d);
  for (std::size_t i = d; i-- > 0;) {
    double acc = rhs[i];
    for (std::size_t j = i + 1; j < d; ++j)
      acc -= gram[i * d + j] * omega_c[j];
    omega_c[i] = acc / gram[i * d + i];
  }
  oracle::dvec omega(n * n, 0.0);
  for (std::size_t a = 0; a < d; ++a) {
    const auto [p, s] = pairs[a];
    omega[p * n + s] = omega_c[a];
    omega[s * n + p] = -omega_c[a];
  }
  const oracle::dvec s_rot = oracle::expm_skew(omega, n);
  const oracle::dvec refit = oracle::matmul_nn(oracle::dvec(q), s_rot, n);
  const oracle::dvec ra = oracle::ref_matmul(refit, w0d, n, n, n);
  double res = 0.0;
  const oracle::dvec w1dd = oracle::to_dvec(w1);
  for (std::size_t i = 0; i < n * n; ++i)
    res += (ra[i] - w1dd[i]) * (ra[i] - w1dd[i]);
  const double refit_nonrot = std::sqrt(res) / frobenius_norm(w0);

  REQUIRE(e.non_rot <= refit_nonrot + 1e-9);      // optimum beats feasible
  REQUIRE(e.non_rot >= 0.8 * refit_nonrot);       // and is within 20%
  REQUIRE(e.non_rot <= 1.2 * refit_nonrot);
}

TEST_CASE("decompose normalization scales exactly", "[rotation]") {
  Rng rng(37);
  Tensor w0 = Tensor::randn({6, 6}, rng);
  Tensor w1 = Tensor::randn({6, 6}, rng);
  Tensor w0s = w0, w1s = w1;
  // powers of two only shift exponents, so every intermediate scales
  // exactly and the normalized outputs are bit-identical
  for (std::size_t i = 0; i < w0.numel(); ++i) {
    w0s[i] *= 4.0f;
    w1s[i] *= 4.0f;
  }
  RotationEntry a = decompose("layers.0.wq", w0, w1);
  RotationEntry b = decompose("layers.0.wq", w0s, w1s);
  REQUIRE(a.rot == b.rot);
  REQUIRE(a.non_rot == b.non_rot);
  REQUIRE(a.side == b.side);
}

TEST_CASE("zero-norm weights are skipped with a warning", "[rotation]") {
  Tensor w0 = Tensor::zeros({4, 4});
  Tensor w1 = Tensor::full({4, 4}, 1.0f);
  RotationEntry e = decompose("layers.0.wv", w0, w1);
  REQUIRE(e.skipped);
  REQUIRE_FALSE(e.warning.empty());
}

TEST_CASE("layer types map by member name", "[rotation]") {
  REQUIRE(layer_type("layers.0.wq") == "q_proj");
  REQUIRE(layer_type("layers.3.wk") == "k_proj");
  REQUIRE(layer_type("layers.1.wv") == "v_proj");
  REQUIRE(layer_type("layers.1.wo") == "o_proj");
  REQUIRE(layer_type("layers.0.w_gate") == "gate_proj");
  REQUIRE(layer_type("layers.0.w_up") == "up_proj");
  REQUIRE(layer_type("layers.0.w_down") == "down_proj");
  REQUIRE(layer_type("head.weight") == "head");
  REQUIRE(layer_type("something.else") == "unmapped");
}

TEST_CASE("report aggregation averages by type", "[rotation]") {
  RotationEntry a{"layers.0.wq", "q_proj", Side::kLeft, 0.2, 0.1, false, ""};
  RotationEntry b{"layers.1.wq", "q_proj", Side::kRight, 0.4, 0.3, false, ""};
  RotationEntry v{"layers.0.wv", "v_proj", Side::kLeft, 0.9, 0.8, false, ""};
  RotationEntry o{"layers.0.wo", "o_proj", Side::kLeft, 0.7, 0.6, false, ""};
  RotationEntry skip{"layers.1.wv", "v_proj", Side::kLeft, 0.0, 0.0, true,
                     "zero"};

  SECTION("single entry") {
    RotationReport r = aggregate_report({a}, false);
    REQUIRE(r.averages.size() == 1);
    REQUIRE(r.averages[0].type == "q_proj");
    REQUIRE(r.averages[0].rot == 0.2);
    REQUIRE(r.averages[0].non_rot == 0.1);
  }

  SECTION("two entries of one type take the arithmetic mean") {
    RotationReport r = aggregate_report({a, b}, false);
    REQUIRE(r.averages.size() == 1);
    REQUIRE(r.averages[0].rot == Catch::Approx(0.3));
    REQUIRE(r.averages[0].non_rot == Catch::Approx(0.2));
    REQUIRE(r.averages[0].count == 2);
  }

  SECTION("exclusion flag drops the twice-rotated projections") {
    RotationReport keep = aggregate_report({a, v, o}, false);
    REQUIRE(keep.averages.size() == 3);
    RotationReport dropped = aggregate_report({a, v, o}, true);
    REQUIRE(dropped.averages.size() == 1);
    REQUIRE(dropped.averages[0].type == "q_proj");
    // entries list keeps everything either way
    REQUIRE(dropped.entries.size() == 3);
  }

  SECTION("skipped entries never contribute") {
    RotationReport r = aggregate_report({v, skip}, false);
    REQUIRE(r.averages.size() == 1);
    REQUIRE(r.averages[0].count == 1);
  }

  SECTION("empty input is rejected") {
    REQUIRE_THROWS_AS(aggregate_report({}, false), InputError);
  }
}

TEST_CASE("report writer emits a delimited table", "[rotation]") {
  RotationEntry a{"layers.0.wq", "q_proj", Side::kLeft, 0.25, 0.125, false,
                  ""};
  RotationReport r = aggregate_report({a}, false);
  std::ostringstream os;
  write_rotation_report(os, r);
  const std::string text = os.str();
  REQUIRE(text.find("layer\ttype\tside\trot\tnon_rot\n") == 0);
  REQUIRE(text.find("layers.0.wq\tq_proj\tleft\t0.25\t0.125\n") !=
          std::string::npos);
  REQUIRE(text.find("(mean)\tq_proj\t-\t0.25\t0.125\n") != std::string::npos);
}

TEST_CASE("model weight decomposition walks every linear site", "[rotation]") {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 32;
  cfg.max_seq = 16;
  Rng r1(3);
  QuantizedModel before(cfg, plan_preset("a8d-c4-w4"), r1);
  QuantizedModel after = before;

  std::vector<RotationEntry> entries = decompose_model_weights(before, after);
  REQUIRE(entries.size() == 15);  // 7 per layer plus the head
  for (const RotationEntry& e : entries) {
    REQUIRE_FALSE(e.skipped);
    REQUIRE(std::fabs(e.rot) < 1e-9);
    REQUIRE(std::fabs(e.non_rot) < 1e-9);
    REQUIRE(e.type != "unmapped");
  }

  ModelConfig other = cfg;
  other.d_model = 32;
  other.n_heads = 4;
  Rng r2(4);
  QuantizedModel wrong(other, plan_preset("a8d-c4-w4"), r2);
  REQUIRE_THROWS_AS(decompose_model_weights(before, wrong), InputError);
}
