// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "silq/tensor.hpp"

namespace silq {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; the tape owns all storage.
struct Value {
  Tape* tape = nullptr;
  std::size_t idx = static_cast<std::size_t>(-1);

  bool defined() const { return tape != nullptr; }
  const Tensor& tensor() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const std::vector<std::size_t>& shape() const { return tensor().shape(); }
};

/// Context handed to backward rules. Propagation runs on scratch gradients so
/// repeated backward() calls each accumulate a full fresh pass into
/// Value::grad.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::vector<Tensor>& scratch)
      : tape_(tape), scratch_(scratch) {}
  const Tensor& val(std::size_t i) const;
  Tensor& grad(std::size_t i) { return scratch_[i]; }
  bool needs(std::size_t i) const;

 private:
  Tape& tape_;
  std::vector<Tensor>& scratch_;
};

/// Recorded computation graph. Nodes are appended in execution order, so the
/// record list is topologically sorted by construction: every node's inputs
/// precede it.
class Tape {
 public:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;  // persistent accumulated gradient, zero-initialized
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    std::function<void(BackwardContext&)> backward;
  };

  Value leaf(Tensor t, bool requires_grad) {
    Node n;
    n.op = "leaf";
    n.grad = Tensor::zeros(t.shape());
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Value{this, nodes_.size() - 1};
  }

  Value constant(Tensor t) { return leaf(std::move(t), false); }

  /// Index the next emitted node will get.
  std::size_t next_index() const { return nodes_.size(); }

  /// Append an op node. requires_grad is inherited from the parents; the
  /// backward rule is dropped when no parent needs gradients.
  Value emit(const char* op, Tensor value, std::vector<std::size_t> parents,
             std::function<void(BackwardContext&)> backward) {
    Node n;
    n.op = op;
    n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (std::size_t p : n.parents)
      if (nodes_[p].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Value{this, nodes_.size() - 1};
  }

  const Node& node(std::size_t i) const { return nodes_[i]; }
  Node& node(std::size_t i) { return nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Gradients of every requires_grad
  /// node up to the loss are accumulated into Value::grad.
  void backward(const Value& loss) {
    check_usage(loss.tape == this, "backward: loss from a different tape");
    check_usage(nodes_[loss.idx].value.numel() == 1,
                "backward requires a scalar loss");
    std::vector<Tensor> scratch(loss.idx + 1);
    for (std::size_t i = 0; i <= loss.idx; ++i)
      scratch[i] = Tensor::zeros(nodes_[i].value.shape());
    scratch[loss.idx][0] = 1.0f;
    BackwardContext ctx(*this, scratch);
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(ctx);
    }
    for (std::size_t i = 0; i <= loss.idx; ++i) {
      if (!nodes_[i].requires_grad) continue;
      Tensor& g = nodes_[i].grad;
      const Tensor& s = scratch[i];
      for (std::size_t j = 0; j < g.numel(); ++j) g[j] += s[j];
    }
  }

  void zero_grad() {
    for (auto& n : nodes_)
      for (auto& v : n.grad.vec()) v = 0.0f;
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Value::tensor() const { return tape->node(idx).value; }
inline const Tensor& Value::grad() const { return tape->node(idx).grad; }
inline bool Value::requires_grad() const {
  return tape->node(idx).requires_grad;
}

inline const Tensor& BackwardContext::val(std::size_t i) const {
  return tape_.node(i).value;
}
inline bool BackwardContext::needs(std::size_t i) const {
  return tape_.node(i).requires_grad;
}

namespace detail {

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n]. Backward: gA += gOut * B^T, gB += A^T * gOut.
inline Value matmul(const Value& a, const Value& b) {
  Tape& tape = *a.tape;
  Tensor out = matmul_tensor(a.tensor(), b.tensor());
  const std::size_t ai = a.idx, bi = b.idx, oi = tape.next_index();
  return tape.emit("matmul", std::move(out), {ai, bi},
                   [ai, bi, oi](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     if (ctx.needs(ai))
                       detail::accumulate(ctx.grad(ai),
                                          matmul_a_bt(go, ctx.val(bi)));
                     if (ctx.needs(bi))
                       detail::accumulate(ctx.grad(bi),
                                          matmul_at_b(ctx.val(ai), go));
                   });
}

/// y = x * W^T for a weight stored row-per-output-channel.
/// x [n x in], w [out x in] -> [n x out].
inline Value linear(const Value& x, const Value& w) {
  Tape& tape = *x.tape;
  Tensor out = matmul_a_bt(x.tensor(), w.tensor());
  const std::size_t xi = x.idx, wi = w.idx, oi = tape.next_index();
  return tape.emit("linear", std::move(out), {xi, wi},
                   [xi, wi, oi](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     if (ctx.needs(xi))
                       detail::accumulate(ctx.grad(xi),
                                          matmul_tensor(go, ctx.val(wi)));
                     if (ctx.needs(wi))
                       detail::accumulate(ctx.grad(wi),
                                          matmul_at_b(go, ctx.val(xi)));
                   });
}

// ---------------------------------------------------------------------------
// Elementwise family. Broadcasting is scalar-vs-tensor only.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_elementwise(const Tensor& a, const Tensor& b,
                              const char* op) {
  check_shape(a.same_shape(b) || a.numel() == 1 || b.numel() == 1,
              std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                  b.shape_str());
}

}  // namespace detail

inline Value add(const Value& a, const Value& b) {
  Tape& tape = *a.tape;
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  detail::check_elementwise(ta, tb, "add");
  const bool sa = ta.numel() == 1, sb = tb.numel() == 1;
  Tensor out = sa ? tb : ta;
  if (sa && !sb) {
    for (auto& v : out.vec()) v += ta[0];
  } else if (sb && !sa) {
    for (auto& v : out.vec()) v += tb[0];
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
  }
  const std::size_t ai = a.idx, bi = b.idx, oi = tape.next_index();
  return tape.emit("add", std::move(out), {ai, bi},
                   [ai, bi, oi](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     for (std::size_t which = 0; which < 2; ++which) {
                       const std::size_t pi = which == 0 ? ai : bi;
                       if (!ctx.needs(pi)) continue;
                       Tensor& gp = ctx.grad(pi);
                       if (gp.numel() == 1 && go.numel() != 1) {
                         double acc = 0.0;
                         for (float v : go.vec()) acc += v;
                         gp[0] += static_cast<float>(acc);
                       } else {
                         detail::accumulate(gp, go);
                       }
                     }
                   });
}

inline Value mul(const Value& a, const Value& b) {
  Tape& tape = *a.tape;
  const Tensor& ta = a.tensor();
  const Tensor& tb = b.tensor();
  detail::check_elementwise(ta, tb, "mul");
  const bool sa = ta.numel() == 1, sb = tb.numel() == 1;
  Tensor out = sa ? tb : ta;
  if (sa && !sb) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[0] * tb[i];
  } else if (sb && !sa) {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[0];
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[i];
  }
  const std::size_t ai = a.idx, bi = b.idx, oi = tape.next_index();
  return tape.emit(
      "mul", std::move(out), {ai, bi}, [ai, bi, oi](BackwardContext& ctx) {
        const Tensor& go = ctx.grad(oi);
        const Tensor& va = ctx.val(ai);
        const Tensor& vb = ctx.val(bi);
        if (ctx.needs(ai)) {
          Tensor& ga = ctx.grad(ai);
          if (va.numel() == 1 && go.numel() != 1) {
            double acc = 0.0;
            for (std::size_t i = 0; i < go.numel(); ++i)
              acc += static_cast<double>(go[i]) * vb[i];
            ga[0] += static_cast<float>(acc);
          } else if (vb.numel() == 1 && go.numel() != 1) {
            for (std::size_t i = 0; i < go.numel(); ++i)
              ga[i] += go[i] * vb[0];
          } else {
            for (std::size_t i = 0; i < go.numel(); ++i)
              ga[i] += go[i] * vb[i];
          }
        }
        if (ctx.needs(bi)) {
          Tensor& gb = ctx.grad(bi);
          if (vb.numel() == 1 && go.numel() != 1) {
            double acc = 0.0;
            for (std::size_t i = 0; i < go.numel(); ++i)
              acc += static_cast<double>(go[i]) * va[i];
            gb[0] += static_cast<float>(acc);
          } else if (va.numel() == 1 && go.numel() != 1) {
            for (std::size_t i = 0; i < go.numel(); ++i)
              gb[i] += go[i] * va[0];
          } else {
            for (std::size_t i = 0; i < go.numel(); ++i)
              gb[i] += go[i] * va[i];
          }
        }
      });
}

/// Multiply by a compile-time constant scalar.
inline Value scale(const Value& x, float c) {
  Tape& tape = *x.tape;
  Tensor out = x.tensor();
  for (auto& v : out.vec()) v *= c;
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("scale", std::move(out), {xi},
                   [xi, oi, c](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < gx.numel(); ++i)
                       gx[i] += c * go[i];
                   });
}

/// x * sigmoid(x).
inline Value silu(const Value& x) {
  Tape& tape = *x.tape;
  const Tensor& tx = x.tensor();
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < tx.numel(); ++i) {
    const float s = 1.0f / (1.0f + std::exp(-tx[i]));
    out[i] = tx[i] * s;
  }
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("silu", std::move(out), {xi},
                   [xi, oi](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     const Tensor& vx = ctx.val(xi);
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < gx.numel(); ++i) {
                       const float s = 1.0f / (1.0f + std::exp(-vx[i]));
                       gx[i] += go[i] * (s + vx[i] * s * (1.0f - s));
                     }
                   });
}

/// 1 / sqrt(x), elementwise. Inputs must be positive.
inline Value rsqrt(const Value& x) {
  Tape& tape = *x.tape;
  const Tensor& tx = x.tensor();
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < tx.numel(); ++i)
    out[i] = 1.0f / std::sqrt(tx[i]);
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("rsqrt", std::move(out), {xi},
                   [xi, oi](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     const Tensor& vx = ctx.val(xi);
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < gx.numel(); ++i) {
                       const float r = 1.0f / std::sqrt(vx[i]);
                       gx[i] += go[i] * (-0.5f * r * r * r);
                     }
                   });
}

/// Sum of all elements -> scalar.
inline Value sum(const Value& x) {
  Tape& tape = *x.tape;
  double acc = 0.0;
  for (float v : x.tensor().vec()) acc += v;
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("sum", Tensor::scalar(static_cast<float>(acc)), {xi},
                   [xi, oi](BackwardContext& ctx) {
                     const float g = ctx.grad(oi)[0];
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
                   });
}

// ---------------------------------------------------------------------------
// softmax / rmsnorm / cross-entropy
// ---------------------------------------------------------------------------

namespace detail {

/// Stabilized softmax of one contiguous stripe.
inline void softmax_stripe(const float* in, float* out, std::size_t n,
                           std::size_t stride) {
  float mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i * stride]);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float e = std::exp(in[i * stride] - mx);
    out[i * stride] = e;
    denom += e;
  }
  const float inv = static_cast<float>(1.0 / denom);
  for (std::size_t i = 0; i < n; ++i) out[i * stride] *= inv;
}

}  // namespace detail

/// Softmax along `axis`. Rank-1 tensors use axis 0; rank-2 accept 0 or 1.
/// Rows are max-shifted before exponentiation.
inline Value softmax(const Value& x, std::size_t axis = 1) {
  Tape& tape = *x.tape;
  const Tensor& tx = x.tensor();
  Tensor out(tx.shape());
  if (tx.rank() == 1) {
    check_input(axis == 0, "softmax: axis out of range for rank-1");
    detail::softmax_stripe(tx.data(), out.data(), tx.numel(), 1);
  } else {
    check_shape(tx.rank() == 2, "softmax supports rank 1 or 2");
    check_input(axis < 2, "softmax: axis out of range");
    const std::size_t r = tx.rows(), c = tx.cols();
    if (axis == 1) {
      for (std::size_t i = 0; i < r; ++i)
        detail::softmax_stripe(tx.data() + i * c, out.data() + i * c, c, 1);
    } else {
      for (std::size_t j = 0; j < c; ++j)
        detail::softmax_stripe(tx.data() + j, out.data() + j, r, c);
    }
  }
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit(
      "softmax", std::move(out), {xi}, [xi, oi, axis](BackwardContext& ctx) {
        const Tensor& y = ctx.val(oi);
        const Tensor& go = ctx.grad(oi);
        Tensor& gx = ctx.grad(xi);
        auto stripe = [&](std::size_t base, std::size_t n, std::size_t stride) {
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            dot += static_cast<double>(go[base + i * stride]) *
                   y[base + i * stride];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = base + i * stride;
            gx[k] += y[k] * (go[k] - static_cast<float>(dot));
          }
        };
        if (y.rank() == 1) {
          stripe(0, y.numel(), 1);
        } else if (axis == 1) {
          for (std::size_t i = 0; i < y.rows(); ++i)
            stripe(i * y.cols(), y.cols(), 1);
        } else {
          for (std::size_t j = 0; j < y.cols(); ++j)
            stripe(j, y.rows(), y.cols());
        }
      });
}

/// x / sqrt(mean(x^2) + eps) * gain, normalizing over the last dimension.
/// x is [n x d] or [d]; gain is [d].
inline Value rmsnorm(const Value& x, const Value& gain, float eps = 1e-6f) {
  Tape& tape = *x.tape;
  const Tensor& tx = x.tensor();
  const Tensor& tg = gain.tensor();
  const std::size_t d = tx.rank() == 1 ? tx.numel() : tx.cols();
  const std::size_t n = tx.rank() == 1 ? 1 : tx.rows();
  check_shape(tg.numel() == d, "rmsnorm: gain length must equal last dim");
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = tx.data() + i * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      ms += static_cast<double>(row[j]) * row[j];
    const float inv = 1.0f / std::sqrt(static_cast<float>(ms / d) + eps);
    float* orow = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) orow[j] = row[j] * inv * tg[j];
  }
  const std::size_t xi = x.idx, gi = gain.idx, oi = tape.next_index();
  return tape.emit(
      "rmsnorm", std::move(out), {xi, gi},
      [xi, gi, oi, eps, n, d](BackwardContext& ctx) {
        const Tensor& vx = ctx.val(xi);
        const Tensor& vg = ctx.val(gi);
        const Tensor& go = ctx.grad(oi);
        for (std::size_t i = 0; i < n; ++i) {
          const float* row = vx.data() + i * d;
          const float* grow = go.data() + i * d;
          double ms = 0.0;
          for (std::size_t j = 0; j < d; ++j)
            ms += static_cast<double>(row[j]) * row[j];
          const float m = static_cast<float>(ms / d) + eps;
          const float inv = 1.0f / std::sqrt(m);
          if (ctx.needs(xi)) {
            // d/dx_j of x_k*inv(x)*g_k: inv*g_j*delta_jk - x_j*x_k*g_k*inv^3/d
            double dot = 0.0;  // sum_k grow_k * g_k * x_k
            for (std::size_t k = 0; k < d; ++k)
              dot += static_cast<double>(grow[k]) * vg[k] * row[k];
            const float c = static_cast<float>(dot) * inv * inv * inv /
                            static_cast<float>(d);
            float* gx = ctx.grad(xi).data() + i * d;
            for (std::size_t j = 0; j < d; ++j)
              gx[j] += grow[j] * vg[j] * inv - c * row[j];
          }
          if (ctx.needs(gi)) {
            Tensor& gg = ctx.grad(gi);
            for (std::size_t j = 0; j < d; ++j)
              gg[j] += grow[j] * row[j] * inv;
          }
        }
      });
}

/// Mean over rows of -sum_v target * log softmax(student). Gradients flow
/// into the student only. `row_weights` (optional) reweights rows; rows with
/// zero weight are excluded entirely (used to mask padding).
inline Value cross_entropy_soft(const Value& student_logits,
                                const Tensor& target_probs,
                                const std::vector<float>& row_weights = {}) {
  Tape& tape = *student_logits.tape;
  const Tensor& s = student_logits.tensor();
  check_shape(s.rank() == 2, "cross_entropy_soft expects [n x v] logits");
  check_shape(s.same_shape(target_probs),
              "cross_entropy_soft: logits/target shape mismatch");
  const std::size_t n = s.rows(), v = s.cols();
  check_input(row_weights.empty() || row_weights.size() == n,
              "cross_entropy_soft: row_weights length mismatch");
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float w = row_weights.empty() ? 1.0f : row_weights[i];
    if (w == 0.0f) continue;
    double tsum = 0.0;
    for (std::size_t j = 0; j < v; ++j) tsum += target_probs.at(i, j);
    check_input(std::fabs(tsum - 1.0) <= 1e-6,
                "cross_entropy_soft: target row does not sum to 1");
    wsum += w;
  }
  check_input(wsum > 0.0, "cross_entropy_soft: no rows carry weight");

  // loss_i = logsumexp(s_i) - sum_v t_iv * s_iv
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float w = row_weights.empty() ? 1.0f : row_weights[i];
    if (w == 0.0f) continue;
    const float* row = s.data() + i * v;
    float mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      denom += std::exp(static_cast<double>(row[j]) - mx);
      dot += static_cast<double>(target_probs.at(i, j)) * (row[j] - mx);
    }
    loss += w * (std::log(denom) - dot);
  }
  loss /= wsum;

  const std::size_t si = student_logits.idx;
  const std::size_t oi = tape.next_index();
  const float wsum_f = static_cast<float>(wsum);
  Tensor targets = target_probs;  // keep a copy for the backward rule
  std::vector<float> weights = row_weights;
  return tape.emit(
      "cross_entropy_soft", Tensor::scalar(static_cast<float>(loss)), {si},
      [si, oi, n, v, wsum_f, targets = std::move(targets),
       weights = std::move(weights)](BackwardContext& ctx) {
        const float g = ctx.grad(oi)[0];
        const Tensor& s = ctx.val(si);
        Tensor& gx = ctx.grad(si);
        for (std::size_t i = 0; i < n; ++i) {
          const float w = weights.empty() ? 1.0f : weights[i];
          if (w == 0.0f) continue;
          const float* row = s.data() + i * v;
          float mx = row[0];
          for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
          double denom = 0.0;
          for (std::size_t j = 0; j < v; ++j)
            denom += std::exp(static_cast<double>(row[j]) - mx);
          const float scale = g * w / wsum_f;
          for (std::size_t j = 0; j < v; ++j) {
            const float p = static_cast<float>(
                std::exp(static_cast<double>(row[j]) - mx) / denom);
            gx.at(i, j) += scale * (p - targets.at(i, j));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops used by the transformer
// ---------------------------------------------------------------------------

/// Gather rows of an embedding table. ids index into table rows; backward
/// scatter-adds into the table gradient.
inline Value embedding_rows(const Value& table,
                            const std::vector<std::size_t>& ids) {
  Tape& tape = *table.tape;
  const Tensor& t = table.tensor();
  check_shape(t.rank() == 2, "embedding_rows expects a rank-2 table");
  const std::size_t d = t.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check_input(ids[i] < t.rows(), "embedding_rows: id out of range");
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = t.at(ids[i], j);
  }
  const std::size_t ti = table.idx, oi = tape.next_index();
  return tape.emit("embedding_rows", std::move(out), {ti},
                   [ti, oi, ids, d](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     Tensor& gt = ctx.grad(ti);
                     for (std::size_t i = 0; i < ids.size(); ++i)
                       for (std::size_t j = 0; j < d; ++j)
                         gt.at(ids[i], j) += go.at(i, j);
                   });
}

/// Column slice [c0, c1) of a rank-2 tensor.
inline Value slice_cols(const Value& x, std::size_t c0, std::size_t c1) {
  Tape& tape = *x.tape;
  const Tensor& t = x.tensor();
  check_shape(t.rank() == 2, "slice_cols expects rank-2");
  check_input(c0 < c1 && c1 <= t.cols(), "slice_cols: bad range");
  const std::size_t n = t.rows(), w = c1 - c0;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = t.at(i, c0 + j);
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("slice_cols", std::move(out), {xi},
                   [xi, oi, c0, n, w](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < w; ++j)
                         gx.at(i, c0 + j) += go.at(i, j);
                   });
}

/// Concatenate rank-2 tensors along columns.
inline Value concat_cols(const std::vector<Value>& parts) {
  check_input(!parts.empty(), "concat_cols: empty input");
  Tape& tape = *parts[0].tape;
  const std::size_t n = parts[0].tensor().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_shape(p.tensor().rank() == 2 && p.tensor().rows() == n,
                "concat_cols: row count mismatch");
    total += p.tensor().cols();
  }
  Tensor out({n, total});
  std::vector<std::size_t> idxs, offs, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& t = p.tensor();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < t.cols(); ++j)
        out.at(i, off + j) = t.at(i, j);
    idxs.push_back(p.idx);
    offs.push_back(off);
    widths.push_back(t.cols());
    off += t.cols();
  }
  const std::size_t oi = tape.next_index();
  std::vector<std::size_t> parents = idxs;
  return tape.emit("concat_cols", std::move(out), std::move(parents),
                   [idxs, offs, widths, oi, n](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     for (std::size_t k = 0; k < idxs.size(); ++k) {
                       if (!ctx.needs(idxs[k])) continue;
                       Tensor& gp = ctx.grad(idxs[k]);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < widths[k]; ++j)
                           gp.at(i, j) += go.at(i, offs[k] + j);
                     }
                   });
}

/// Add a constant tensor (same shape); used for the causal attention mask.
inline Value add_const(const Value& x, const Tensor& c) {
  Tape& tape = *x.tape;
  const Tensor& t = x.tensor();
  check_shape(t.same_shape(c), "add_const: shape mismatch");
  Tensor out = t;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("add_const", std::move(out), {xi},
                   [xi, oi](BackwardContext& ctx) {
                     detail::accumulate(ctx.grad(xi), ctx.grad(oi));
                   });
}

/// Rotary position encoding over pairs of adjacent features.
/// x is [t x d] with even d; row i is rotated by angles for position
/// pos0 + i. The backward rule applies the inverse rotation.
inline Value rope(const Value& x, std::size_t pos0, float base = 10000.0f) {
  Tape& tape = *x.tape;
  const Tensor& t = x.tensor();
  check_shape(t.rank() == 2 && t.cols() % 2 == 0,
              "rope expects [t x d] with even d");
  const std::size_t n = t.rows(), d = t.cols(), half = d / 2;
  auto angle = [base, d](std::size_t pos, std::size_t k) {
    return static_cast<float>(
        pos * std::pow(static_cast<double>(base),
                       -2.0 * static_cast<double>(k) / static_cast<double>(d)));
  };
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const float a = angle(pos0 + i, k);
      const float c = std::cos(a), s = std::sin(a);
      const float x0 = t.at(i, 2 * k), x1 = t.at(i, 2 * k + 1);
      out.at(i, 2 * k) = x0 * c - x1 * s;
      out.at(i, 2 * k + 1) = x0 * s + x1 * c;
    }
  }
  const std::size_t xi = x.idx, oi = tape.next_index();
  return tape.emit("rope", std::move(out), {xi},
                   [xi, oi, pos0, n, half, angle](BackwardContext& ctx) {
                     const Tensor& go = ctx.grad(oi);
                     Tensor& gx = ctx.grad(xi);
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t k = 0; k < half; ++k) {
                         const float a = angle(pos0 + i, k);
                         const float c = std::cos(a), s = std::sin(a);
                         const float g0 = go.at(i, 2 * k);
                         const float g1 = go.at(i, 2 * k + 1);
                         gx.at(i, 2 * k) += g0 * c + g1 * s;
                         gx.at(i, 2 * k + 1) += -g0 * s + g1 * c;
                       }
                     }
                   });
}

/// Convenience entry point mirroring Tape::backward.
inline void backward(const Value& loss) { loss.tape->backward(loss); }

}  // namespace silq
