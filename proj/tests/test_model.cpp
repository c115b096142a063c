// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>
#include <cstring>

#include "oracle.hpp"
#include "ref_transformer.hpp"
#include "silq/error.hpp"
#include "silq/model.hpp"
#include "silq/rng.hpp"

using oracle::dvec;
using silq::CalibObserver;
using silq::KVCacheStore;
using silq::ModelConfig;
using silq::PrecisionPlan;
using silq::QuantizedModel;
using silq::Rng;
using silq::RunMode;
using silq::Tape;
using silq::Tensor;
using silq::Value;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  c.max_seq = 32;
  return c;
}

std::vector<std::size_t> random_tokens(Rng& rng, std::size_t n,
                                       std::size_t vocab) {
  std::vector<std::size_t> t(n);
  for (auto& v : t) v = rng.index(vocab);
  return t;
}

/// Mean next-token cross entropy with one-hot targets, built from library
/// ops so gradients flow to every parameter.
Value next_token_loss(Tape& tape, const Value& logits,
                      const std::vector<std::size_t>& toks) {
  const std::size_t T = toks.size(), v = logits.tensor().cols();
  Tensor targets = Tensor::zeros({T, v});
  std::vector<float> weights(T, 1.0f);
  for (std::size_t t = 0; t + 1 < T; ++t) targets.at(t, toks[t + 1]) = 1.0f;
  targets.at(T - 1, 0) = 1.0f;  // placeholder row, weight zero below
  weights[T - 1] = 0.0f;
  return silq::cross_entropy_soft(logits, targets, weights);
}

}  // namespace

TEST_CASE("quantizer sites cover the architecture", "[model]") {
  ModelConfig cfg;  // defaults: 2 layers
  PrecisionPlan plan = silq::plan_preset("a8s-c8-w4");
  auto sites = silq::quantizer_sites(cfg, plan);
  REQUIRE(sites.size() == 30);

  std::size_t weights = 0, acts = 0, caches = 0;
  for (const auto& s : sites) {
    if (s.kind == silq::SiteKind::kWeight) {
      ++weights;
      REQUIRE(s.granularity == silq::Granularity::kPerChannel);
      REQUIRE_FALSE(s.dynamic);
    } else if (s.kind == silq::SiteKind::kCache) {
      ++caches;
    } else {
      ++acts;
    }
  }
  REQUIRE(weights == 15);  // 7 per layer plus the head
  REQUIRE(caches == 4);    // key and value per layer
  REQUIRE(acts == 11);

  // The optional attention-probability site adds one per layer.
  plan.attn_probs_int16 = true;
  REQUIRE(silq::quantizer_sites(cfg, plan).size() == 32);

  // No site touches the embedding.
  for (const auto& s : silq::quantizer_sites(cfg, plan))
    REQUIRE(s.name.find("embedding") == std::string::npos);
}

TEST_CASE("precision plan presets", "[model]") {
  for (const char* name : {"a8s-c8-w4", "a8d-c8-w4", "a8d-c4-w4"}) {
    PrecisionPlan p = silq::plan_preset(name);
    REQUIRE_NOTHROW(silq::validate_plan(p));
    REQUIRE(p.act_bits == 8);
    REQUIRE(p.weight_bits == 4);
    REQUIRE(p.query_bits == 16);
    REQUIRE(p.head_bits == 8);
  }
  REQUIRE_FALSE(silq::plan_preset("a8s-c8-w4").dynamic_acts);
  REQUIRE(silq::plan_preset("a8d-c8-w4").dynamic_acts);
  REQUIRE(silq::plan_preset("a8d-c8-w4").cache_bits == 8);
  REQUIRE(silq::plan_preset("a8d-c4-w4").cache_bits == 4);

  PrecisionPlan p16 = silq::plan_preset("all-16-bit");
  REQUIRE_NOTHROW(silq::validate_plan(p16));
  REQUIRE(p16.act_bits == 16);
  REQUIRE(p16.weight_bits == 16);

  REQUIRE_THROWS_AS(silq::plan_preset("a9s-c8-w4"), silq::InputError);

  PrecisionPlan bad;
  bad.act_bits = 5;
  REQUIRE_THROWS_AS(silq::validate_plan(bad), silq::InputError);

  ModelConfig odd = tiny_config();
  odd.n_heads = 3;  // 16 / 3 is not integral
  REQUIRE_THROWS_AS(silq::validate_config(odd), silq::InputError);
}

TEST_CASE("full-precision forward matches the double reference", "[model]") {
  Rng rng(40);
  QuantizedModel m(tiny_config(), silq::plan_preset("a8d-c8-w4"), rng);
  auto rt = oracle::RefTransformer::from(m);
  auto toks = random_tokens(rng, 9, m.config.vocab_size);

  Tape tape;
  auto bound = m.bind(tape, false);
  Value logits = m.forward(tape, bound, toks, RunMode::kFullPrecision);
  const dvec want = rt.logits(toks);
  double worst = 0.0;
  for (std::size_t i = 0; i < logits.tensor().numel(); ++i)
    worst = std::max(worst,
                     std::fabs(logits.tensor()[i] - want[i]));
  REQUIRE(worst < 1e-5);
}

TEST_CASE("whole-model gradients match reference finite differences",
          "[model]") {
  Rng rng(41);
  QuantizedModel m(tiny_config(), silq::plan_preset("a8d-c8-w4"), rng);
  auto rt = oracle::RefTransformer::from(m);
  auto toks = random_tokens(rng, 8, m.config.vocab_size);

  Tape tape;
  auto bound = m.bind(tape, true);
  Value logits = m.forward(tape, bound, toks, RunMode::kFullPrecision);
  Value loss = next_token_loss(tape, logits, toks);
  REQUIRE(loss.tensor()[0] ==
          Catch::Approx(rt.ce_loss(toks)).epsilon(1e-4));
  tape.backward(loss);

  for (const char* name :
       {"embedding", "layers.0.wq", "layers.0.attn_norm_gain",
        "layers.0.w_gate", "layers.1.wo", "layers.1.w_down",
        "final_norm_gain", "head.weight"}) {
    dvec& pv = *rt.by_name.at(name);
    auto f = [&](const dvec& v) {
      dvec keep = pv;
      pv = v;
      const double l = rt.ce_loss(toks);
      pv = keep;
      return l;
    };
    const dvec fd = oracle::fd_grad(f, pv, 1e-5);
    INFO("parameter: " << name);
    REQUIRE(oracle::max_grad_error(bound.at(name).grad(), fd) < 1e-3);
  }
}

TEST_CASE("future tokens cannot influence earlier logits", "[model]") {
  Rng rng(42);
  QuantizedModel m(tiny_config(), silq::plan_preset("a8d-c4-w4"), rng);
  auto toks = random_tokens(rng, 10, m.config.vocab_size);
  auto toks2 = toks;
  toks2[7] = (toks2[7] + 3) % m.config.vocab_size;
  toks2[9] = (toks2[9] + 5) % m.config.vocab_size;

  for (RunMode mode : {RunMode::kFullPrecision, RunMode::kQuantized}) {
    Tape t1, t2;
    auto b1 = m.bind(t1, false);
    auto b2 = m.bind(t2, false);
    Tensor l1 = m.forward(t1, b1, toks, mode).tensor();
    Tensor l2 = m.forward(t2, b2, toks2, mode).tensor();
    const std::size_t v = l1.cols();
    // Rows 0..6 see identical prefixes and must agree exactly.
    REQUIRE(std::memcmp(l1.data(), l2.data(), 7 * v * sizeof(float)) == 0);
    // Row 7 differs (its own token changed).
    bool differs = false;
    for (std::size_t j = 0; j < v; ++j)
      differs |= l1.at(7, j) != l2.at(7, j);
    REQUIRE(differs);
  }
}

TEST_CASE("sixteen-bit plan is near identity", "[model]") {
  Rng rng(43);
  QuantizedModel m(tiny_config(), silq::plan_preset("all-16-bit"), rng);
  auto toks = random_tokens(rng, 12, m.config.vocab_size);
  Tape t1, t2;
  auto b1 = m.bind(t1, false);
  auto b2 = m.bind(t2, false);
  Tensor fp = m.forward(t1, b1, toks, RunMode::kFullPrecision).tensor();
  Tensor q = m.forward(t2, b2, toks, RunMode::kQuantized).tensor();
  double worst = 0.0;
  for (std::size_t i = 0; i < fp.numel(); ++i)
    worst = std::max(worst, static_cast<double>(std::fabs(fp[i] - q[i])));
  REQUIRE(worst < 1e-2);
  REQUIRE(worst > 0.0);  // quantization did happen
}

TEST_CASE("static plans require calibration before quantized runs",
          "[model]") {
  Rng rng(44);
  QuantizedModel m(tiny_config(), silq::plan_preset("a8s-c8-w4"), rng);
  auto toks = random_tokens(rng, 8, m.config.vocab_size);
  Tape tape;
  auto bound = m.bind(tape, false);
  REQUIRE_THROWS_AS(m.forward(tape, bound, toks, RunMode::kQuantized),
                    silq::UsageError);
}

TEST_CASE("observe pass collects pools and calibration installs scales",
          "[model]") {
  Rng rng(45);
  ModelConfig cfg = tiny_config();
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.max_seq = 64;
  QuantizedModel m(cfg, silq::plan_preset("a8s-c8-w4"), rng);
  REQUIRE(m.steps.size() == 15);  // weight scales exist from construction

  CalibObserver obs;
  for (int doc = 0; doc < 2; ++doc) {
    auto toks = random_tokens(rng, 40, cfg.vocab_size);
    Tape tape;
    auto bound = m.bind(tape, false);
    m.forward(tape, bound, toks, RunMode::kObserve, &obs);
  }
  // 15 non-weight sites, each pooling 2 * 40 * width samples.
  REQUIRE(obs.pools.size() == 15);
  for (const auto& [site, pool] : obs.pools) {
    INFO(site);
    REQUIRE(pool.size() >= 1000);
  }

  m.calibrate_activations(obs);
  REQUIRE(m.steps.size() == 30);
  for (const auto& [name, s] : m.steps)
    for (std::size_t i = 0; i < s.numel(); ++i) REQUIRE(s[i] > 0.0f);

  // Quantized forward now runs, and differs from full precision.
  auto toks = random_tokens(rng, 10, cfg.vocab_size);
  Tape tape;
  auto bound = m.bind(tape, false);
  Tensor q = m.forward(tape, bound, toks, RunMode::kQuantized).tensor();
  Tape tfp;
  auto bfp = m.bind(tfp, false);
  Tensor fp = m.forward(tfp, bfp, toks, RunMode::kFullPrecision).tensor();
  bool differs = false;
  for (std::size_t i = 0; i < q.numel(); ++i) differs |= q[i] != fp[i];
  REQUIRE(differs);
}

TEST_CASE("incremental decode reproduces full-sequence rows exactly",
          "[model]") {
  Rng rng(46);
  auto run = [&](const std::string& preset, bool calibrate) {
    ModelConfig cfg = tiny_config();
    QuantizedModel m(cfg, silq::plan_preset(preset), rng);
    if (calibrate) {
      CalibObserver obs;
      for (int doc = 0; doc < 8; ++doc) {
        auto toks = random_tokens(rng, 16, cfg.vocab_size);
        Tape tape;
        auto bound = m.bind(tape, false);
        m.forward(tape, bound, toks, RunMode::kObserve, &obs);
      }
      m.calibrate_activations(obs);
    }
    auto toks = random_tokens(rng, 12, cfg.vocab_size);
    for (RunMode mode : {RunMode::kQuantized, RunMode::kFullPrecision}) {
      Tape tape;
      auto bound = m.bind(tape, false);
      Tensor full = m.forward(tape, bound, toks, mode).tensor();
      KVCacheStore store(cfg.n_layers);
      for (std::size_t t = 0; t < toks.size(); ++t) {
        Tensor row = m.decode_step(toks[t], store, mode);
        INFO(preset << " mode=" << static_cast<int>(mode) << " t=" << t);
        REQUIRE(std::memcmp(row.data(), full.data() + t * full.cols(),
                            full.cols() * sizeof(float)) == 0);
      }
    }
  };
  run("a8d-c4-w4", false);
  run("a8s-c8-w4", true);
}

TEST_CASE("gradients reach weights, steps, and the embedding", "[model]") {
  Rng rng(47);
  ModelConfig cfg = tiny_config();
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.max_seq = 64;
  QuantizedModel m(cfg, silq::plan_preset("a8s-c8-w4"), rng);
  CalibObserver obs;
  for (int doc = 0; doc < 2; ++doc) {
    auto toks = random_tokens(rng, 40, cfg.vocab_size);
    Tape tape;
    auto bound = m.bind(tape, false);
    m.forward(tape, bound, toks, RunMode::kObserve, &obs);
  }
  m.calibrate_activations(obs);

  auto toks = random_tokens(rng, 16, cfg.vocab_size);
  Tape tape;
  auto bound = m.bind(tape, true);
  Value logits = m.forward(tape, bound, toks, RunMode::kQuantized);
  tape.backward(next_token_loss(tape, logits, toks));

  REQUIRE(bound.at("embedding").grad().max_abs() > 0.0f);
  REQUIRE(bound.at("layers.0.wq").grad().max_abs() > 0.0f);
  REQUIRE(bound.at("layers.1.w_down").grad().max_abs() > 0.0f);
  REQUIRE(bound.at("layers.0.wq.step").grad().max_abs() > 0.0f);
  REQUIRE(bound.at("layers.0.attn_input.step").grad().max_abs() > 0.0f);
  REQUIRE(bound.at("head.weight.step").grad().max_abs() > 0.0f);

  // Dynamic plans own no activation step tensors at all.
  QuantizedModel md(cfg, silq::plan_preset("a8d-c8-w4"), rng);
  REQUIRE(md.steps.size() == 15);
  for (const auto& [name, s] : md.steps)
    REQUIRE(name.find("input") == std::string::npos);
}

TEST_CASE("perplexity of an untrained model sits near uniform", "[model]") {
  Rng rng(48);
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = 64;
  QuantizedModel m(cfg, silq::plan_preset("a8d-c8-w4"), rng);
  std::vector<std::vector<std::size_t>> docs;
  for (int i = 0; i < 3; ++i)
    docs.push_back(random_tokens(rng, 24, cfg.vocab_size));
  const double ppl = silq::eval_perplexity(m, docs, 63, RunMode::kQuantized);
  REQUIRE(ppl > 45.0);
  REQUIRE(ppl < 90.0);
}

TEST_CASE("padded positions are excluded from perplexity", "[model]") {
  Rng rng(49);
  ModelConfig cfg = tiny_config();
  QuantizedModel m(cfg, silq::plan_preset("a8d-c8-w4"), rng);
  const std::size_t pad = cfg.vocab_size - 1;
  std::vector<std::size_t> doc = {1, 4, 7, 2};
  std::vector<std::size_t> padded = doc;
  padded.push_back(pad);
  padded.push_back(pad);
  const double a =
      silq::eval_perplexity(m, {doc}, pad, RunMode::kFullPrecision);
  const double b =
      silq::eval_perplexity(m, {padded}, pad, RunMode::kFullPrecision);
  REQUIRE(a == b);  // identical scoreable positions, identical rows
}
