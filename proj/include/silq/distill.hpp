// SPDX-License-Identifier: Apache-2.0
//
// Distillation training loop: temperature-scaled KD loss, cosine learning
// rate schedule with sqrt step-count compensation, AdamW with separate
// parameter groups for weights, weight step sizes, and activation step
// sizes, and the deterministic train driver.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "silq/autodiff.hpp"
#include "silq/corpus.hpp"
#include "silq/error.hpp"
#include "silq/model.hpp"
#include "silq/quant.hpp"
#include "silq/rng.hpp"
#include "silq/tensor.hpp"

namespace silq {

/// How the soft and hard loss terms combine. kConvex weights them r and
/// (1 - r); kAdditive keeps the hard term at full strength alongside r
/// times the soft term.
enum class KdMixing { kConvex, kAdditive };

struct TrainConfig {
  double base_lr = 5e-6;
  std::size_t base_steps = 8000;
  std::size_t steps = 8000;
  float kd_ratio = 1.0f;
  float kd_temp = 1.0f;
  float mixture_ratio = 0.25f;  // fraction of samples from the pretrain set
  float act_lr_multiplier = 50.0f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float adam_eps = 1e-10f;
  float weight_decay = 0.1f;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  float min_lr_fraction = 0.1f;
  float dropout = 0.0f;  // accepted for config compatibility; must stay 0
  std::uint64_t seed = 0;
  bool auto_lr = false;   // rescale peak lr by sqrt(base_steps / steps)
  float grad_clip = 0.0f; // 0 disables clipping
  KdMixing kd_mixing = KdMixing::kConvex;
};

inline void validate_train_config(const TrainConfig& c) {
  check_input(c.base_lr > 0.0, "train: base_lr must be positive");
  check_input(c.base_steps >= 1, "train: base_steps must be at least 1");
  check_input(c.kd_ratio >= 0.0f && c.kd_ratio <= 1.0f,
              "train: kd_ratio must lie in [0, 1]");
  check_input(c.kd_temp > 0.0f, "train: kd_temp must be positive");
  check_input(c.mixture_ratio >= 0.0f && c.mixture_ratio <= 1.0f,
              "train: mixture_ratio must lie in [0, 1]");
  check_input(c.act_lr_multiplier > 0.0f,
              "train: act_lr_multiplier must be positive");
  check_input(c.beta1 >= 0.0f && c.beta1 < 1.0f &&
                  c.beta2 >= 0.0f && c.beta2 < 1.0f,
              "train: betas must lie in [0, 1)");
  check_input(c.adam_eps > 0.0f, "train: adam_eps must be positive");
  check_input(c.weight_decay >= 0.0f, "train: weight_decay must be >= 0");
  check_input(c.batch_size >= 1, "train: batch_size must be at least 1");
  check_input(c.seq_len >= 2, "train: seq_len must be at least 2");
  check_input(c.min_lr_fraction > 0.0f && c.min_lr_fraction <= 1.0f,
              "train: min_lr_fraction must lie in (0, 1]");
  check_input(c.dropout == 0.0f, "train: dropout must be 0");
  check_input(c.grad_clip >= 0.0f, "train: grad_clip must be >= 0");
}

// ---------------------------------------------------------------------------
// Learning rate schedule
// ---------------------------------------------------------------------------

/// Cosine decay from peak to min_fraction * peak over total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps,
                          double peak, double min_fraction = 0.1) {
  check_input(total_steps >= 1, "lr_schedule: total_steps must be >= 1");
  check_input(step <= total_steps, "lr_schedule: step beyond schedule end");
  const double lo = min_fraction * peak;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lo + 0.5 * (peak - lo) * (1.0 + std::cos(t * 3.14159265358979323846));
}

/// Compensate a retuned step budget: shorter runs take proportionally
/// larger steps so total parameter motion stays comparable.
inline double scale_lr_for_steps(double base_lr, std::size_t base_steps,
                                 std::size_t new_steps) {
  check_input(base_steps >= 1 && new_steps >= 1,
              "scale_lr_for_steps: step counts must be >= 1");
  return base_lr * std::sqrt(static_cast<double>(base_steps) /
                             static_cast<double>(new_steps));
}

inline double resolve_peak_lr(const TrainConfig& c) {
  if (!c.auto_lr || c.steps == 0) return c.base_lr;
  return scale_lr_for_steps(c.base_lr, c.base_steps, c.steps);
}

// ---------------------------------------------------------------------------
// KD loss
// ---------------------------------------------------------------------------

/// Soft-target distillation loss over one sequence of logits.
///
/// loss = r * T^2 * CE(softmax(teacher / T), student / T)
///      + c_hard  * CE(one_hot(targets), student)
/// with c_hard = 1 - r (convex mixing, default) or 1 (additive). Rows whose
/// target is pad_id carry no weight; a term whose coefficient is zero is not
/// built at all, so kd_ratio == 0 never touches the teacher and
/// kd_ratio == 1 under convex mixing never touches the hard targets.
inline Value kd_loss(const Value& student_logits, const Tensor& teacher_logits,
                     const std::vector<std::size_t>& targets,
                     std::size_t pad_id, float kd_ratio, float kd_temp,
                     KdMixing mixing = KdMixing::kConvex) {
  const Tensor& s = student_logits.tensor();
  check_shape(s.rank() == 2, "kd_loss: student logits must be [rows x vocab]");
  const std::size_t n = s.rows(), v = s.cols();
  check_input(targets.size() == n, "kd_loss: one target per logit row");
  check_input(kd_ratio >= 0.0f && kd_ratio <= 1.0f,
              "kd_loss: kd_ratio must lie in [0, 1]");
  check_input(kd_temp > 0.0f, "kd_loss: kd_temp must be positive");

  std::vector<float> w(n);
  std::size_t live = 0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = targets[i] == pad_id ? 0.0f : 1.0f;
    live += targets[i] == pad_id ? 0 : 1;
  }
  check_input(live > 0, "kd_loss: every row is padding");

  const double r = kd_ratio;
  const double tau = kd_temp;
  const double soft_c = r * tau * tau;
  const double hard_c = mixing == KdMixing::kConvex ? 1.0 - r : 1.0;

  Value total;
  bool have = false;
  if (soft_c > 0.0) {
    check_shape(s.same_shape(teacher_logits),
                "kd_loss: teacher/student logit shape mismatch");
    Tensor tp({n, v});
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = teacher_logits.data() + i * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j)
        denom += std::exp((row[j] - mx) / tau);
      for (std::size_t j = 0; j < v; ++j)
        tp.at(i, j) =
            static_cast<float>(std::exp((row[j] - mx) / tau) / denom);
    }
    Value soft = cross_entropy_soft(
        scale(student_logits, static_cast<float>(1.0 / tau)), tp, w);
    total = scale(soft, static_cast<float>(soft_c));
    have = true;
  }
  if (hard_c > 0.0) {
    Tensor onehot = Tensor::zeros({n, v});
    for (std::size_t i = 0; i < n; ++i) {
      if (w[i] == 0.0f) continue;
      check_input(targets[i] < v, "kd_loss: target id out of vocabulary");
      onehot.at(i, targets[i]) = 1.0f;
    }
    Value hard = scale(cross_entropy_soft(student_logits, onehot, w),
                       static_cast<float>(hard_c));
    total = have ? add(total, hard) : hard;
    have = true;
  }
  check_input(have, "kd_loss: both loss terms have zero coefficient");
  return total;
}

/// Next-token targets for one padded document: row t predicts tokens[t + 1],
/// and the final row (nothing to predict) is marked with pad_id.
inline std::vector<std::size_t> shift_targets(
    const std::vector<std::size_t>& tokens, std::size_t pad_id) {
  std::vector<std::size_t> t(tokens.size(), pad_id);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) t[i] = tokens[i + 1];
  return t;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct ParamGroup {
  double lr_mult = 1.0;
  double weight_decay = 0.0;
  bool clamp_scale_floor = false;  // step-size tensors stay >= kScaleFloor
};

/// Decoupled weight decay Adam. Moment state is kept in double so the only
/// rounding is the f32 store of the parameter itself; the decay multiply
/// comes before the moment update, matching the reference decoupled form.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps) {}

  void begin_step() { ++t_; }

  void update(const std::string& name, Tensor& p, const Tensor& g,
              const ParamGroup& grp, double lr) {
    check_shape(p.same_shape(g), "adamw: param/grad shape mismatch");
    check_usage(t_ >= 1, "adamw: call begin_step before update");
    Slot& slot = state_[name];
    if (slot.m.empty()) {
      slot.m.assign(p.numel(), 0.0);
      slot.v.assign(p.numel(), 0.0);
    }
    const double step_lr = lr * grp.lr_mult;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    float* pd = p.data();
    const float* gd = g.data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double x = pd[i];
      const double gi = gd[i];
      x *= 1.0 - step_lr * grp.weight_decay;
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      x -= step_lr * mhat / (std::sqrt(vhat) + eps_);
      pd[i] = static_cast<float>(x);
      if (grp.clamp_scale_floor && pd[i] < kScaleFloor) pd[i] = kScaleFloor;
    }
  }

  std::size_t step_count() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot> state_;
  std::size_t t_ = 0;
  double beta1_, beta2_, eps_;
};

/// Assign every trainable tensor of the model to its optimizer group.
/// Regular parameters decay; step sizes do not, and activation and cache
/// step sizes run at a boosted learning rate.
inline std::map<std::string, ParamGroup> build_param_groups(
    QuantizedModel& model, const TrainConfig& cfg) {
  std::map<std::string, ParamGroup> groups;
  model.params.visit([&](const std::string& name, Tensor&) {
    groups[name] = ParamGroup{1.0, cfg.weight_decay, false};
  });
  for (const SiteInfo& s : quantizer_sites(model.config, model.plan)) {
    if (model.steps.find(s.name) == model.steps.end()) continue;
    const bool is_weight = s.kind == SiteKind::kWeight;
    groups[s.name + ".step"] =
        ParamGroup{is_weight ? 1.0 : double(cfg.act_lr_multiplier), 0.0, true};
  }
  return groups;
}

namespace detail {

inline void model_tensors(QuantizedModel& m,
                          const std::function<void(const std::string&,
                                                   Tensor&)>& f) {
  m.params.visit([&](const std::string& name, Tensor& t) { f(name, t); });
  for (auto& [name, t] : m.steps) f(name + ".step", t);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct BatchSample {
  std::vector<std::size_t> tokens;
  bool from_pretrain;
};

/// Draw one batch. Each sample independently picks the pretrain corpus with
/// probability mixture_ratio, then a uniform document, padded to seq_len.
inline std::vector<BatchSample> sample_batch(Rng& rng, const Corpus& pretrain,
                                             const Corpus& tuning,
                                             float mixture_ratio,
                                             std::size_t batch_size,
                                             std::size_t seq_len) {
  std::vector<BatchSample> batch;
  batch.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const bool pre = rng.bernoulli(mixture_ratio);
    const Corpus& src = pre ? pretrain : tuning;
    batch.push_back(
        {pad_doc(src.docs[rng.index(src.docs.size())], seq_len), pre});
  }
  return batch;
}

struct StepRecord {
  std::size_t step;
  double loss;
  double lr;
  double grad_norm;
};

struct TrainResult {
  std::vector<StepRecord> records;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

/// One QAT run. Each batch draws documents per-sample from the pretrain or
/// tuning corpus with probability mixture_ratio, runs the frozen teacher at
/// full precision, and follows the KD loss gradient through the quantized
/// student. The whole loop is a pure function of (models, corpora, config),
/// so a repeated run reproduces the metric stream bit for bit. A non-finite
/// loss aborts with the step, loss, and lr in the diagnostic.
inline TrainResult train_qat(
    QuantizedModel& student, QuantizedModel* teacher, const Corpus& pretrain,
    const Corpus& tuning, const TrainConfig& cfg,
    const std::function<void(const StepRecord&)>& on_step = {}) {
  validate_train_config(cfg);
  check_input(cfg.kd_ratio == 0.0f || teacher != nullptr,
              "train: kd_ratio > 0 needs a teacher model");
  check_input(!pretrain.docs.empty() && !tuning.docs.empty(),
              "train: both corpora must be non-empty");

  Rng rng(cfg.seed);
  AdamW opt(cfg);
  const std::map<std::string, ParamGroup> groups =
      build_param_groups(student, cfg);
  const double peak = resolve_peak_lr(cfg);

  TrainResult out;
  out.records.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = lr_schedule(step, cfg.steps, peak, cfg.min_lr_fraction);

    const std::vector<BatchSample> batch = sample_batch(
        rng, pretrain, tuning, cfg.mixture_ratio, cfg.batch_size, cfg.seq_len);

    Tape tape;
    auto bound = student.bind(tape, true);
    Value total;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& toks = batch[b].tokens;
      Value logits = student.forward(tape, bound, toks, RunMode::kQuantized);
      Tensor teacher_logits;
      if (cfg.kd_ratio > 0.0f) {
        Tape tt;
        auto tb = teacher->bind(tt, false);
        teacher_logits =
            teacher->forward(tt, tb, toks, RunMode::kFullPrecision).tensor();
      }
      Value doc_loss =
          kd_loss(logits, teacher_logits, shift_targets(toks, kPadToken),
                  kPadToken, cfg.kd_ratio, cfg.kd_temp, cfg.kd_mixing);
      total = b == 0 ? doc_loss : add(total, doc_loss);
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));

    const double loss = total.tensor()[0];
    if (!std::isfinite(loss))
      throw DivergenceError("training diverged at step " +
                            std::to_string(step) + ": loss=" +
                            std::to_string(loss) + " lr=" +
                            std::to_string(lr));
    tape.backward(total);

    // Pull gradients out of the tape so clipping cannot disturb it.
    std::map<std::string, Tensor> grads;
    double sq = 0.0;
    detail::model_tensors(student, [&](const std::string& name, Tensor&) {
      const Tensor& g = bound.at(name).grad();
      for (std::size_t i = 0; i < g.numel(); ++i)
        sq += double(g[i]) * double(g[i]);
      grads.emplace(name, g);
    });
    const double grad_norm = std::sqrt(sq);
    if (!std::isfinite(grad_norm))
      throw DivergenceError("training diverged at step " +
                            std::to_string(step) +
                            ": non-finite gradient norm");
    if (cfg.grad_clip > 0.0f && grad_norm > cfg.grad_clip) {
      const float s = static_cast<float>(cfg.grad_clip / grad_norm);
      for (auto& [name, g] : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= s;
    }

    opt.begin_step();
    detail::model_tensors(student, [&](const std::string& name, Tensor& t) {
      opt.update(name, t, grads.at(name), groups.at(name), lr);
    });

    StepRecord rec{step, loss, lr, grad_norm};
    out.records.push_back(rec);
    out.final_loss = loss;
    if (on_step) on_step(rec);
  }
  return out;
}

}  // namespace silq
