// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only transformer with fake quantizers at fixed sites:
// shared activation quantizers in front of the attention and MLP input
// projections, separate ones in front of the output and down projections,
// a 16-bit query quantizer after the rotary encoding, key/value cache
// quantizers, per-output-channel weight quantizers on every projection, and
// an 8-bit pair on the output head. The token embedding is never quantized.
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "silq/autodiff.hpp"
#include "silq/calib.hpp"
#include "silq/error.hpp"
#include "silq/quant.hpp"
#include "silq/rng.hpp"
#include "silq/tensor.hpp"

namespace silq {

inline constexpr float kMaskValue = -1e30f;

struct ModelConfig {
  std::size_t vocab_size = 258;  // 256 byte values + PAD + BOS
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_seq = 128;
  float rope_base = 10000.0f;
  float norm_eps = 1e-6f;

  std::size_t head_dim() const { return d_model / n_heads; }
};

inline void validate_config(const ModelConfig& c) {
  check_input(c.vocab_size > 0 && c.d_model > 0 && c.n_heads > 0 &&
                  c.n_layers > 0 && c.d_ff > 0 && c.max_seq > 0,
              "model config: dimensions must be positive");
  check_input(c.d_model % c.n_heads == 0,
              "model config: d_model must divide evenly into heads");
  check_input((c.d_model / c.n_heads) % 2 == 0,
              "model config: head dim must be even for rotary pairs");
}

/// Which quantizers exist and how they behave. Weight scales are always
/// learned statics; activation, cache, and query scales are either learned
/// statics or recomputed per token, chosen by dynamic_acts.
struct PrecisionPlan {
  std::string name = "a8s-c8-w4";
  int act_bits = 8;
  int weight_bits = 4;
  int cache_bits = 8;
  int query_bits = 16;
  int head_bits = 8;  // head input activation and head weight
  bool dynamic_acts = false;
  bool attn_probs_int16 = false;  // optional extra site, off by default
  bool lsq_grad_scale = true;
};

inline PrecisionPlan plan_preset(const std::string& name) {
  PrecisionPlan p;
  p.name = name;
  if (name == "a8s-c8-w4") {
    p.dynamic_acts = false;
  } else if (name == "a8d-c8-w4") {
    p.dynamic_acts = true;
  } else if (name == "a8d-c4-w4") {
    p.dynamic_acts = true;
    p.cache_bits = 4;
  } else if (name == "all-16-bit") {
    p.act_bits = p.weight_bits = p.cache_bits = p.query_bits = p.head_bits = 16;
    p.dynamic_acts = true;
  } else {
    throw InputError("unknown precision plan: " + name);
  }
  return p;
}

inline void validate_plan(const PrecisionPlan& p) {
  check_bits(p.act_bits);
  check_bits(p.weight_bits);
  check_bits(p.cache_bits);
  check_bits(p.query_bits);
  check_bits(p.head_bits);
}

enum class SiteKind { kActivation, kWeight, kCache };

struct SiteInfo {
  std::string name;
  SiteKind kind;
  int bits;
  Granularity granularity;
  bool dynamic;
  std::size_t channels;  // rows of the scale tensor for per-channel sites
};

/// Enumerate every quantizer the plan places in the model, in a fixed order.
inline std::vector<SiteInfo> quantizer_sites(const ModelConfig& cfg,
                                             const PrecisionPlan& plan) {
  validate_config(cfg);
  validate_plan(plan);
  std::vector<SiteInfo> sites;
  const bool dyn = plan.dynamic_acts;
  const Granularity act_g =
      dyn ? Granularity::kPerToken : Granularity::kPerTensor;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    sites.push_back({p + "attn_input", SiteKind::kActivation, plan.act_bits,
                     act_g, dyn, 1});
    sites.push_back({p + "query", SiteKind::kActivation, plan.query_bits,
                     act_g, dyn, 1});
    sites.push_back({p + "key_cache", SiteKind::kCache, plan.cache_bits, act_g,
                     dyn, 1});
    sites.push_back({p + "value_cache", SiteKind::kCache, plan.cache_bits,
                     act_g, dyn, 1});
    if (plan.attn_probs_int16)
      sites.push_back({p + "attn_probs", SiteKind::kActivation, 16,
                       Granularity::kPerToken, true, 1});
    sites.push_back({p + "o_input", SiteKind::kActivation, plan.act_bits,
                     act_g, dyn, 1});
    sites.push_back({p + "mlp_input", SiteKind::kActivation, plan.act_bits,
                     act_g, dyn, 1});
    sites.push_back({p + "down_input", SiteKind::kActivation, plan.act_bits,
                     act_g, dyn, 1});
    for (const char* w : {"wq", "wk", "wv", "wo"})
      sites.push_back({p + w, SiteKind::kWeight, plan.weight_bits,
                       Granularity::kPerChannel, false, cfg.d_model});
    for (const char* w : {"w_gate", "w_up"})
      sites.push_back({p + w, SiteKind::kWeight, plan.weight_bits,
                       Granularity::kPerChannel, false, cfg.d_ff});
    sites.push_back({p + "w_down", SiteKind::kWeight, plan.weight_bits,
                     Granularity::kPerChannel, false, cfg.d_model});
  }
  sites.push_back({"head.input", SiteKind::kActivation, plan.head_bits, act_g,
                   dyn, 1});
  sites.push_back({"head.weight", SiteKind::kWeight, plan.head_bits,
                   Granularity::kPerChannel, false, cfg.vocab_size});
  return sites;
}

struct LayerParams {
  Tensor attn_norm_gain, wq, wk, wv, wo;
  Tensor mlp_norm_gain, w_gate, w_up, w_down;
};

struct ModelParams {
  Tensor embedding;  // [vocab x d]
  std::vector<LayerParams> layers;
  Tensor final_norm_gain;
  Tensor head_weight;  // [vocab x d]

  static ModelParams init(const ModelConfig& cfg, Rng& rng,
                          float weight_std = 0.02f) {
    validate_config(cfg);
    ModelParams p;
    p.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.0f,
                                weight_std);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.attn_norm_gain = Tensor::full({cfg.d_model}, 1.0f);
      l.mlp_norm_gain = Tensor::full({cfg.d_model}, 1.0f);
      l.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.0f, weight_std);
      l.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.0f, weight_std);
      l.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.0f, weight_std);
      l.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.0f, weight_std);
      l.w_gate = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, 0.0f, weight_std);
      l.w_up = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, 0.0f, weight_std);
      l.w_down = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, 0.0f, weight_std);
    }
    p.final_norm_gain = Tensor::full({cfg.d_model}, 1.0f);
    p.head_weight = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.0f,
                                  weight_std);
    return p;
  }

  /// Visit every parameter as (name, tensor) in a fixed order.
  template <class F>
  void visit(F&& f) {
    f("embedding", embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm_gain", layers[l].attn_norm_gain);
      f(p + "wq", layers[l].wq);
      f(p + "wk", layers[l].wk);
      f(p + "wv", layers[l].wv);
      f(p + "wo", layers[l].wo);
      f(p + "mlp_norm_gain", layers[l].mlp_norm_gain);
      f(p + "w_gate", layers[l].w_gate);
      f(p + "w_up", layers[l].w_up);
      f(p + "w_down", layers[l].w_down);
    }
    f("final_norm_gain", final_norm_gain);
    f("head.weight", head_weight);
  }
};

enum class RunMode {
  kFullPrecision,  // no quantizers anywhere (teacher / reference)
  kObserve,        // weights quantized, activations recorded but not quantized
  kQuantized,      // all quantizers active
};

/// Collects pre-quantization activation samples during an observe pass.
struct CalibObserver {
  std::map<std::string, std::vector<float>> pools;

  void record(const std::string& site, const Tensor& t) {
    auto& pool = pools[site];
    pool.insert(pool.end(), t.data(), t.data() + t.numel());
  }
};

/// Growing per-layer store of quantized key/value rows for incremental
/// decoding. Rows hold fake-quantized (already dequantized) values, matching
/// what the full-sequence forward feeds the attention matmuls.
struct KVCacheStore {
  std::vector<std::vector<float>> k, v;  // per layer, row-major [t x d]
  std::size_t tokens = 0;

  explicit KVCacheStore(std::size_t n_layers) : k(n_layers), v(n_layers) {}
};

class QuantizedModel {
 public:
  ModelConfig config;
  PrecisionPlan plan;
  ModelParams params;
  // Learned step sizes, keyed by site name. Weight sites are always present;
  // activation/cache/query sites only when the plan uses static scales.
  std::map<std::string, Tensor> steps;

  QuantizedModel(ModelConfig cfg, PrecisionPlan pl, Rng& rng)
      : config(cfg), plan(pl), params(ModelParams::init(cfg, rng)) {
    init_weight_steps();
  }

  QuantizedModel(ModelConfig cfg, PrecisionPlan pl, ModelParams p)
      : config(cfg), plan(pl), params(std::move(p)) {
    validate_config(config);
    validate_plan(plan);
    init_weight_steps();
  }

  /// Recompute weight step sizes from the current weights by convex error
  /// minimization. Called at construction and again by the calibrate command
  /// after weights are loaded.
  void init_weight_steps() {
    for (const SiteInfo& s : quantizer_sites(config, plan)) {
      if (s.kind != SiteKind::kWeight) continue;
      steps[s.name] = calibrate_mse(weight_by_site(s.name), s.bits);
    }
  }

  /// Install static activation scales from observed pools. Every static
  /// non-weight site must have a pool; scales come from the clipped
  /// percentile of the pooled magnitudes.
  void calibrate_activations(const CalibObserver& obs) {
    check_usage(!plan.dynamic_acts,
                "calibrate_activations: plan uses dynamic scales");
    for (const SiteInfo& s : quantizer_sites(config, plan)) {
      if (s.kind == SiteKind::kWeight || s.dynamic) continue;
      auto it = obs.pools.find(s.name);
      check_input(it != obs.pools.end(),
                  "calibrate_activations: no samples for site " + s.name);
      steps[s.name] =
          Tensor({1}, {calibrate_percentile(it->second, s.bits)});
    }
  }

  const Tensor& weight_by_site(const std::string& site) const {
    if (site == "head.weight") return params.head_weight;
    // "layers.<l>.<member>"
    const std::size_t dot1 = site.find('.');
    const std::size_t dot2 = site.find('.', dot1 + 1);
    const std::size_t l = std::stoul(site.substr(dot1 + 1, dot2 - dot1 - 1));
    const std::string member = site.substr(dot2 + 1);
    const LayerParams& lp = params.layers.at(l);
    if (member == "wq") return lp.wq;
    if (member == "wk") return lp.wk;
    if (member == "wv") return lp.wv;
    if (member == "wo") return lp.wo;
    if (member == "w_gate") return lp.w_gate;
    if (member == "w_up") return lp.w_up;
    if (member == "w_down") return lp.w_down;
    throw UsageError("unknown weight site: " + site);
  }

  /// Bind every trainable tensor (parameters and step sizes) as tape leaves.
  std::map<std::string, Value> bind(Tape& tape, bool trainable) {
    std::map<std::string, Value> bound;
    params.visit([&](const std::string& name, Tensor& t) {
      bound.emplace(name, tape.leaf(t, trainable));
    });
    for (auto& [name, t] : steps)
      bound.emplace(name + ".step", tape.leaf(t, trainable));
    return bound;
  }

  /// Full-sequence forward. Returns [T x vocab] logits on the tape.
  Value forward(Tape& tape, std::map<std::string, Value>& bound,
                const std::vector<std::size_t>& tokens, RunMode mode,
                CalibObserver* observer = nullptr) const {
    const std::size_t T = tokens.size();
    check_input(T >= 1 && T <= config.max_seq,
                "forward: sequence length out of range");
    check_usage(mode != RunMode::kObserve || observer != nullptr,
                "forward: observe mode needs an observer");

    Value x = embedding_lookup(tape, bound, tokens);
    Tensor mask = causal_mask(T);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      // Attention block.
      Value h = rmsnorm(x, bound.at(p + "attn_norm_gain"), config.norm_eps);
      Value a_in = quant_act(h, p + "attn_input", plan.act_bits, mode, bound,
                             observer);
      Value q = linear(a_in, quant_w(bound.at(p + "wq"), p + "wq", mode, bound));
      Value k = linear(a_in, quant_w(bound.at(p + "wk"), p + "wk", mode, bound));
      Value v = linear(a_in, quant_w(bound.at(p + "wv"), p + "wv", mode, bound));
      Value q_rot = rope_heads(q, 0);
      Value k_rot = rope_heads(k, 0);
      Value q_q = quant_act(q_rot, p + "query", plan.query_bits, mode, bound,
                            observer);
      Value k_q = quant_act(k_rot, p + "key_cache", plan.cache_bits, mode,
                            bound, observer);
      Value v_q = quant_act(v, p + "value_cache", plan.cache_bits, mode, bound,
                            observer);
      Value ctx = attention(q_q, k_q, v_q, mask, p, mode);
      Value o_in = quant_act(ctx, p + "o_input", plan.act_bits, mode, bound,
                             observer);
      Value att = linear(o_in, quant_w(bound.at(p + "wo"), p + "wo", mode,
                                       bound));
      x = add(x, att);

      // MLP block.
      Value h2 = rmsnorm(x, bound.at(p + "mlp_norm_gain"), config.norm_eps);
      Value m_in = quant_act(h2, p + "mlp_input", plan.act_bits, mode, bound,
                             observer);
      Value gate = silu(linear(
          m_in, quant_w(bound.at(p + "w_gate"), p + "w_gate", mode, bound)));
      Value up = linear(
          m_in, quant_w(bound.at(p + "w_up"), p + "w_up", mode, bound));
      Value prod = mul(gate, up);
      Value d_in = quant_act(prod, p + "down_input", plan.act_bits, mode,
                             bound, observer);
      Value mlp = linear(
          d_in, quant_w(bound.at(p + "w_down"), p + "w_down", mode, bound));
      x = add(x, mlp);
    }
    Value h = rmsnorm(x, bound.at("final_norm_gain"), config.norm_eps);
    Value head_in =
        quant_act(h, "head.input", plan.head_bits, mode, bound, observer);
    return linear(head_in,
                  quant_w(bound.at("head.weight"), "head.weight", mode, bound));
  }

  /// One decode step against a growing cache. Returns the logits row for
  /// this position. Pure tensor math; matches the corresponding row of the
  /// full-sequence forward exactly because every per-row loop is identical.
  Tensor decode_step(std::size_t token, KVCacheStore& store,
                     RunMode mode = RunMode::kQuantized) const {
    check_usage(mode != RunMode::kObserve, "decode_step: observe unsupported");
    const std::size_t pos = store.tokens;
    check_input(pos < config.max_seq, "decode_step: cache is full");
    check_input(token < config.vocab_size, "decode_step: token out of range");
    const std::size_t d = config.d_model;
    Tensor x({1, d});
    for (std::size_t j = 0; j < d; ++j)
      x[j] = params.embedding.at(token, j);

    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const LayerParams& lp = params.layers[l];
      Tensor h = rmsnorm_rows(x, lp.attn_norm_gain);
      Tensor a_in = quant_act_raw(h, p + "attn_input", plan.act_bits, mode);
      Tensor q = matmul_a_bt(a_in, qw_raw(lp.wq, p + "wq", mode));
      Tensor k = matmul_a_bt(a_in, qw_raw(lp.wk, p + "wk", mode));
      Tensor v = matmul_a_bt(a_in, qw_raw(lp.wv, p + "wv", mode));
      Tensor q_rot = rope_heads_raw(q, pos);
      Tensor k_rot = rope_heads_raw(k, pos);
      Tensor q_q = quant_act_raw(q_rot, p + "query", plan.query_bits, mode);
      Tensor k_q = quant_act_raw(k_rot, p + "key_cache", plan.cache_bits, mode);
      Tensor v_q = quant_act_raw(v, p + "value_cache", plan.cache_bits, mode);
      store.k[l].insert(store.k[l].end(), k_q.data(), k_q.data() + d);
      store.v[l].insert(store.v[l].end(), v_q.data(), v_q.data() + d);

      const std::size_t t = pos + 1;
      Tensor keys({t, d}, std::vector<float>(store.k[l]));
      Tensor vals({t, d}, std::vector<float>(store.v[l]));
      Tensor ctx({1, d});
      const std::size_t nh = config.n_heads, dh = config.head_dim();
      const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
      for (std::size_t hd = 0; hd < nh; ++hd) {
        // scores over cached positions, one row
        Tensor sc({1, t});
        for (std::size_t j = 0; j < t; ++j) {
          float acc = 0.0f;
          for (std::size_t c = 0; c < dh; ++c)
            acc += q_q[hd * dh + c] * keys.at(j, hd * dh + c);
          sc[j] = acc;
        }
        for (std::size_t j = 0; j < t; ++j) sc[j] *= inv;
        Tensor pr = softmax_row(sc);
        if (plan.attn_probs_int16 && mode == RunMode::kQuantized)
          pr = quantize_fake(pr, compute_dynamic_scale(pr, 16),
                             QuantizerSpec{16, Granularity::kPerToken});
        for (std::size_t c = 0; c < dh; ++c) {
          float acc = 0.0f;
          for (std::size_t j = 0; j < t; ++j)
            acc += pr[j] * vals.at(j, hd * dh + c);
          ctx[hd * dh + c] = acc;
        }
      }
      Tensor o_in = quant_act_raw(ctx, p + "o_input", plan.act_bits, mode);
      Tensor att = matmul_a_bt(o_in, qw_raw(lp.wo, p + "wo", mode));
      for (std::size_t j = 0; j < d; ++j) x[j] += att[j];

      Tensor h2 = rmsnorm_rows(x, lp.mlp_norm_gain);
      Tensor m_in = quant_act_raw(h2, p + "mlp_input", plan.act_bits, mode);
      Tensor gate = matmul_a_bt(m_in, qw_raw(lp.w_gate, p + "w_gate", mode));
      Tensor up = matmul_a_bt(m_in, qw_raw(lp.w_up, p + "w_up", mode));
      for (std::size_t j = 0; j < config.d_ff; ++j) {
        const float s = 1.0f / (1.0f + std::exp(-gate[j]));
        gate[j] = gate[j] * s * up[j];
      }
      Tensor d_in = quant_act_raw(gate, p + "down_input", plan.act_bits, mode);
      Tensor mlp = matmul_a_bt(d_in, qw_raw(lp.w_down, p + "w_down", mode));
      for (std::size_t j = 0; j < d; ++j) x[j] += mlp[j];
    }
    store.tokens = pos + 1;
    Tensor h = rmsnorm_rows(x, params.final_norm_gain);
    Tensor head_in = quant_act_raw(h, "head.input", plan.head_bits, mode);
    return matmul_a_bt(head_in, qw_raw(params.head_weight, "head.weight", mode));
  }

 private:
  Value embedding_lookup(Tape& tape, std::map<std::string, Value>& bound,
                         const std::vector<std::size_t>& tokens) const {
    for (std::size_t t : tokens)
      check_input(t < config.vocab_size, "forward: token id out of range");
    return embedding_rows(bound.at("embedding"), tokens);
  }

  Tensor causal_mask(std::size_t T) const {
    Tensor m = Tensor::zeros({T, T});
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i + 1; j < T; ++j) m.at(i, j) = kMaskValue;
    return m;
  }

  /// Apply the rotary encoding head by head, starting at position pos0.
  Value rope_heads(const Value& x, std::size_t pos0) const {
    const std::size_t nh = config.n_heads, dh = config.head_dim();
    std::vector<Value> parts;
    parts.reserve(nh);
    for (std::size_t h = 0; h < nh; ++h)
      parts.push_back(
          rope(slice_cols(x, h * dh, (h + 1) * dh), pos0, config.rope_base));
    return concat_cols(parts);
  }

  Tensor rope_heads_raw(const Tensor& x, std::size_t pos0) const {
    const std::size_t nh = config.n_heads, dh = config.head_dim();
    const std::size_t n = x.rows();
    Tensor out(x.shape());
    for (std::size_t h = 0; h < nh; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t kk = 0; kk < dh / 2; ++kk) {
          const float a = static_cast<float>(
              (pos0 + i) *
              std::pow(static_cast<double>(config.rope_base),
                       -2.0 * static_cast<double>(kk) /
                           static_cast<double>(dh)));
          const float c = std::cos(a), s = std::sin(a);
          const float x0 = x.at(i, h * dh + 2 * kk);
          const float x1 = x.at(i, h * dh + 2 * kk + 1);
          out.at(i, h * dh + 2 * kk) = x0 * c - x1 * s;
          out.at(i, h * dh + 2 * kk + 1) = x0 * s + x1 * c;
        }
    return out;
  }

  static const Value& step_of(const std::map<std::string, Value>& bound,
                              const std::string& site) {
    auto it = bound.find(site + ".step");
    check_usage(it != bound.end(),
                "no step size for site " + site + "; calibrate first");
    return it->second;
  }

  Value quant_act(const Value& x, const std::string& site, int bits,
                  RunMode mode, std::map<std::string, Value>& bound,
                  CalibObserver* observer) const {
    if (mode == RunMode::kFullPrecision) return x;
    if (mode == RunMode::kObserve) {
      observer->record(site, x.tensor());
      return x;
    }
    if (plan.dynamic_acts) return fake_quant_dynamic(x, bits);
    return fake_quant(x, step_of(bound, site),
                      QuantizerSpec{bits, Granularity::kPerTensor,
                                    plan.lsq_grad_scale});
  }

  Value quant_w(const Value& w, const std::string& site, RunMode mode,
                std::map<std::string, Value>& bound) const {
    if (mode == RunMode::kFullPrecision) return w;
    const int bits = site == "head.weight" ? plan.head_bits : plan.weight_bits;
    return fake_quant(w, step_of(bound, site),
                      QuantizerSpec{bits, Granularity::kPerChannel,
                                    plan.lsq_grad_scale});
  }

  Value attention(const Value& q, const Value& k, const Value& v,
                  const Tensor& mask, const std::string& prefix,
                  RunMode mode) const {
    const std::size_t nh = config.n_heads, dh = config.head_dim();
    const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Value> heads;
    heads.reserve(nh);
    for (std::size_t h = 0; h < nh; ++h) {
      Value qh = slice_cols(q, h * dh, (h + 1) * dh);
      Value kh = slice_cols(k, h * dh, (h + 1) * dh);
      Value vh = slice_cols(v, h * dh, (h + 1) * dh);
      Value sc = add_const(scale(linear(qh, kh), inv), mask);
      Value pr = softmax(sc, 1);
      if (plan.attn_probs_int16 && mode == RunMode::kQuantized)
        pr = fake_quant_dynamic(pr, 16);
      heads.push_back(matmul(pr, vh));
    }
    return concat_cols(heads);
  }

  // --- raw-tensor twins used by the decode path ---------------------------

  Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain) const {
    const std::size_t n = x.rows(), d = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double ms = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        ms += static_cast<double>(x.at(i, j)) * x.at(i, j);
      const float inv =
          1.0f / std::sqrt(static_cast<float>(ms / d) + config.norm_eps);
      for (std::size_t j = 0; j < d; ++j)
        out.at(i, j) = x.at(i, j) * inv * gain[j];
    }
    return out;
  }

  Tensor softmax_row(const Tensor& x) const {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    float mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float e = std::exp(x[i] - mx);
      out[i] = e;
      denom += e;
    }
    const float invd = static_cast<float>(1.0 / denom);
    for (std::size_t i = 0; i < n; ++i) out[i] *= invd;
    return out;
  }

  const Tensor& step_tensor(const std::string& site) const {
    auto it = steps.find(site);
    check_usage(it != steps.end(),
                "no step size for site " + site + "; calibrate first");
    return it->second;
  }

  Tensor quant_act_raw(const Tensor& x, const std::string& site, int bits,
                       RunMode mode) const {
    if (mode == RunMode::kFullPrecision) return x;
    if (plan.dynamic_acts)
      return quantize_fake(x, compute_dynamic_scale(x, bits),
                           QuantizerSpec{bits, Granularity::kPerToken});
    return quantize_fake(x, step_tensor(site),
                         QuantizerSpec{bits, Granularity::kPerTensor});
  }

  Tensor qw_raw(const Tensor& w, const std::string& site, RunMode mode) const {
    if (mode == RunMode::kFullPrecision) return w;
    const int bits = site == "head.weight" ? plan.head_bits : plan.weight_bits;
    return quantize_fake(w, step_tensor(site),
                         QuantizerSpec{bits, Granularity::kPerChannel});
  }
};

/// Perplexity over padded documents: exp of the mean next-token negative log
/// likelihood, with positions whose target is the pad token excluded.
inline double eval_perplexity(QuantizedModel& model,
                              const std::vector<std::vector<std::size_t>>& docs,
                              std::size_t pad_id, RunMode mode) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    check_input(doc.size() >= 2, "eval: document too short");
    Tape tape;
    auto bound = model.bind(tape, false);
    Value logits = model.forward(tape, bound, doc, mode);
    const Tensor& lg = logits.tensor();
    const std::size_t v = lg.cols();
    for (std::size_t t = 0; t + 1 < doc.size(); ++t) {
      if (doc[t + 1] == pad_id) continue;
      const float* row = lg.data() + t * v;
      float mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j)
        denom += std::exp(static_cast<double>(row[j]) - mx);
      nll += std::log(denom) - (row[doc[t + 1]] - mx);
      ++count;
    }
  }
  check_input(count > 0, "eval: no scoreable positions");
  return std::exp(nll / static_cast<double>(count));
}

}  // namespace silq
