// SPDX-License-Identifier: Apache-2.0
//
// JSON configuration for the CLI: model, precision plan, training, corpora,
// and paths, with round-trip serialization. Every field has a default, so a
// config file only states what it changes. The echo written by each command
// is a full dump of the resolved struct; feeding it back reproduces the run.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "silq/distill.hpp"
#include "silq/error.hpp"
#include "silq/model.hpp"

namespace silq {

using json = nlohmann::json;

// --- model -----------------------------------------------------------------

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
           {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
           {"d_ff", c.d_ff},             {"max_seq", c.max_seq},
           {"rope_base", c.rope_base},   {"norm_eps", c.norm_eps}};
}

inline void from_json(const json& j, ModelConfig& c) {
  const ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

// --- precision plan ----------------------------------------------------------

inline void to_json(json& j, const PrecisionPlan& p) {
  j = json{{"name", p.name},
           {"act_bits", p.act_bits},
           {"weight_bits", p.weight_bits},
           {"cache_bits", p.cache_bits},
           {"query_bits", p.query_bits},
           {"head_bits", p.head_bits},
           {"dynamic_acts", p.dynamic_acts},
           {"attn_probs_int16", p.attn_probs_int16},
           {"lsq_grad_scale", p.lsq_grad_scale}};
}

/// A plan is either a preset name ("a8s-c8-w4") or an object; an object may
/// carry a "name" preset to start from, with explicit fields overriding it.
inline void from_json(const json& j, PrecisionPlan& p) {
  if (j.is_string()) {
    p = plan_preset(j.get<std::string>());
    return;
  }
  check_input(j.is_object(), "plan: expected preset name or object");
  PrecisionPlan base;
  if (j.contains("name") && !j.at("name").get<std::string>().empty())
    base = plan_preset(j.at("name").get<std::string>());
  base.act_bits = j.value("act_bits", base.act_bits);
  base.weight_bits = j.value("weight_bits", base.weight_bits);
  base.cache_bits = j.value("cache_bits", base.cache_bits);
  base.query_bits = j.value("query_bits", base.query_bits);
  base.head_bits = j.value("head_bits", base.head_bits);
  base.dynamic_acts = j.value("dynamic_acts", base.dynamic_acts);
  base.attn_probs_int16 = j.value("attn_probs_int16", base.attn_probs_int16);
  base.lsq_grad_scale = j.value("lsq_grad_scale", base.lsq_grad_scale);
  p = base;
}

// --- training ----------------------------------------------------------------

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"base_lr", c.base_lr},
           {"base_steps", c.base_steps},
           {"steps", c.steps},
           {"kd_ratio", c.kd_ratio},
           {"kd_temp", c.kd_temp},
           {"mixture_ratio", c.mixture_ratio},
           {"act_lr_multiplier", c.act_lr_multiplier},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"seq_len", c.seq_len},
           {"min_lr_fraction", c.min_lr_fraction},
           {"dropout", c.dropout},
           {"seed", c.seed},
           {"auto_lr", c.auto_lr},
           {"grad_clip", c.grad_clip},
           {"kd_mixing",
            c.kd_mixing == KdMixing::kConvex ? "convex" : "additive"}};
}

inline void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.base_lr = j.value("base_lr", d.base_lr);
  c.base_steps = j.value("base_steps", d.base_steps);
  c.steps = j.value("steps", d.steps);
  c.kd_ratio = j.value("kd_ratio", d.kd_ratio);
  c.kd_temp = j.value("kd_temp", d.kd_temp);
  c.mixture_ratio = j.value("mixture_ratio", d.mixture_ratio);
  c.act_lr_multiplier = j.value("act_lr_multiplier", d.act_lr_multiplier);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.min_lr_fraction = j.value("min_lr_fraction", d.min_lr_fraction);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
  c.auto_lr = j.value("auto_lr", d.auto_lr);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  const std::string mixing = j.value("kd_mixing", std::string("convex"));
  if (mixing == "convex") {
    c.kd_mixing = KdMixing::kConvex;
  } else if (mixing == "additive") {
    c.kd_mixing = KdMixing::kAdditive;
  } else {
    throw InputError("train: kd_mixing must be convex or additive");
  }
}

// --- corpora -----------------------------------------------------------------

/// A corpus comes from a synthetic generator id or a text file (one document
/// per line). The mixture weight between the pretrain and tuning corpora is
/// train.mixture_ratio and its complement, so the weights sum to 1 by
/// construction.
struct CorpusSpec {
  std::string source = "markov-chain";
  std::string tokenizer = "byte";
  std::uint64_t seed = 0;
  std::size_t docs = 256;
  std::size_t skip = 0;  // drop this many leading documents; lets one
                         // generator seed provide disjoint train/holdout
                         // splits of the same distribution
};

inline void to_json(json& j, const CorpusSpec& c) {
  j = json{{"source", c.source},
           {"tokenizer", c.tokenizer},
           {"seed", c.seed},
           {"docs", c.docs},
           {"skip", c.skip}};
}

inline void from_json(const json& j, CorpusSpec& c) {
  const CorpusSpec d;
  c.source = j.value("source", d.source);
  c.tokenizer = j.value("tokenizer", d.tokenizer);
  c.seed = j.value("seed", d.seed);
  c.docs = j.value("docs", d.docs);
  c.skip = j.value("skip", d.skip);
  check_input(c.tokenizer == "byte",
              "corpus: only the byte tokenizer is supported");
}

// --- top level ----------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  PrecisionPlan plan = plan_preset("a8s-c8-w4");
  TrainConfig train;
  std::size_t calib_batches = 5;
  std::size_t calib_batch_size = 128;
  CorpusSpec pretrain_corpus{"markov-chain", "byte", 101, 512};
  CorpusSpec tuning_corpus{"template-dialogue", "byte", 102, 512};
  CorpusSpec holdout_corpus{"markov-chain", "byte", 103, 64};
  std::string train_mode = "qat";  // "qat" distills; "pretrain" bootstraps a
                                   // teacher with plain next-token loss
  bool rotation_exclude_double_rotated = true;
  bool rotation_allow_reflection = false;
  std::string teacher_path;
  std::string input_path;
  std::string output_path;
  std::string metrics_path;
  std::string report_path;
  std::string echo_path;
};

inline void to_json(json& j, const RunConfig& c) {
  j = json{{"model", c.model},
           {"plan", c.plan},
           {"train", c.train},
           {"calib", json{{"batches", c.calib_batches},
                          {"batch_size", c.calib_batch_size}}},
           {"corpora", json{{"pretrain", c.pretrain_corpus},
                            {"tuning", c.tuning_corpus},
                            {"holdout", c.holdout_corpus}}},
           {"train_mode", c.train_mode},
           {"rotation",
            json{{"exclude_double_rotated", c.rotation_exclude_double_rotated},
                 {"allow_reflection", c.rotation_allow_reflection}}},
           {"paths", json{{"teacher", c.teacher_path},
                          {"input", c.input_path},
                          {"output", c.output_path},
                          {"metrics", c.metrics_path},
                          {"report", c.report_path},
                          {"echo", c.echo_path}}}};
}

inline void from_json(const json& j, RunConfig& c) {
  const RunConfig d;
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("plan")) c.plan = j.at("plan").get<PrecisionPlan>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("calib")) {
    const json& cj = j.at("calib");
    c.calib_batches = cj.value("batches", d.calib_batches);
    c.calib_batch_size = cj.value("batch_size", d.calib_batch_size);
  }
  if (j.contains("corpora")) {
    const json& cj = j.at("corpora");
    if (cj.contains("pretrain"))
      c.pretrain_corpus = cj.at("pretrain").get<CorpusSpec>();
    if (cj.contains("tuning"))
      c.tuning_corpus = cj.at("tuning").get<CorpusSpec>();
    if (cj.contains("holdout"))
      c.holdout_corpus = cj.at("holdout").get<CorpusSpec>();
  }
  c.train_mode = j.value("train_mode", d.train_mode);
  check_input(c.train_mode == "qat" || c.train_mode == "pretrain",
              "train_mode must be qat or pretrain");
  if (j.contains("rotation")) {
    const json& rj = j.at("rotation");
    c.rotation_exclude_double_rotated =
        rj.value("exclude_double_rotated", d.rotation_exclude_double_rotated);
    c.rotation_allow_reflection =
        rj.value("allow_reflection", d.rotation_allow_reflection);
  }
  if (j.contains("paths")) {
    const json& pj = j.at("paths");
    c.teacher_path = pj.value("teacher", d.teacher_path);
    c.input_path = pj.value("input", d.input_path);
    c.output_path = pj.value("output", d.output_path);
    c.metrics_path = pj.value("metrics", d.metrics_path);
    c.report_path = pj.value("report", d.report_path);
    c.echo_path = pj.value("echo", d.echo_path);
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("config parse error in " + path + ": " + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw InputError("config field error in " + path + ": " + e.what());
  }
}

inline std::string dump_run_config(const RunConfig& c) {
  json j = c;
  return j.dump(2) + "\n";
}

}  // namespace silq
