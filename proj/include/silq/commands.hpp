// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the CLI. Each command takes a resolved
// RunConfig, does its work, and reports through the given stream; failures
// surface as typed errors that the CLI maps onto exit codes. Keeping these
// as plain functions lets tests drive them without spawning processes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "silq/checkpoint.hpp"
#include "silq/config.hpp"
#include "silq/corpus.hpp"
#include "silq/distill.hpp"
#include "silq/error.hpp"
#include "silq/model.hpp"
#include "silq/rotation.hpp"

namespace silq {

/// A corpus spec names either a built-in generator or a text file with one
/// document per line.
inline Corpus load_corpus(const CorpusSpec& spec) {
  Corpus c;
  if (spec.source == "markov-chain" || spec.source == "arithmetic-patterns" ||
      spec.source == "template-dialogue") {
    c = make_synthetic_corpus(spec.source, spec.seed, spec.skip + spec.docs);
  } else {
    std::ifstream in(spec.source);
    if (!in) throw IoError("cannot open corpus file: " + spec.source);
    c.generator = "file:" + spec.source;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) c.docs.push_back(encode_bytes(line));
  }
  check_input(c.docs.size() > spec.skip,
              "corpus has no documents after skip: " + spec.source);
  c.docs.erase(c.docs.begin(),
               c.docs.begin() + static_cast<std::ptrdiff_t>(spec.skip));
  return c;
}

namespace detail {

inline QuantizedModel model_from_file(const std::string& path) {
  return model_from_checkpoint(load_checkpoint_file(path));
}

/// Truncate a document to the model's context window.
inline std::vector<std::size_t> fit_doc(const std::vector<std::size_t>& doc,
                                        std::size_t max_seq) {
  if (doc.size() <= max_seq) return doc;
  return std::vector<std::size_t>(doc.begin(), doc.begin() + max_seq);
}

inline Tensor model_logits(QuantizedModel& m,
                           const std::vector<std::size_t>& tokens,
                           RunMode mode) {
  Tape tape;
  auto bound = m.bind(tape, false);
  Value v = m.forward(tape, bound, tokens, mode);
  return v.tensor();
}

}  // namespace detail

/// Load a full-precision checkpoint, rebuild its weight step sizes under the
/// configured precision plan, and (for static plans) fit activation and
/// cache scales from observed forward passes. Writes a new checkpoint.
inline void cmd_calibrate(const RunConfig& cfg, std::ostream& out) {
  check_input(!cfg.input_path.empty(), "calibrate: paths.input is required");
  check_input(!cfg.output_path.empty(),
              "calibrate: paths.output is required");

  const Checkpoint src = load_checkpoint_file(cfg.input_path);
  Rng rng(cfg.train.seed);
  QuantizedModel m(src.model, cfg.plan, rng);
  m.params.visit([&](const std::string& name, Tensor& t) {
    t = src.dequantized(name);
  });
  m.init_weight_steps();

  if (!cfg.plan.dynamic_acts) {
    const Corpus cal = load_corpus(cfg.pretrain_corpus);
    const std::size_t need = cfg.calib_batches * cfg.calib_batch_size;
    check_input(need >= 1, "calibrate: needs at least one sample");
    out << "observing " << cfg.calib_batches << " batches x "
        << cfg.calib_batch_size << " samples\n";
    CalibObserver obs;
    for (std::size_t i = 0; i < need; ++i) {
      const auto doc =
          detail::fit_doc(cal.docs[i % cal.docs.size()], m.config.max_seq);
      Tape tape;
      auto bound = m.bind(tape, false);
      m.forward(tape, bound, doc, RunMode::kObserve, &obs);
    }
    m.calibrate_activations(obs);
  } else {
    out << "plan uses dynamic activation scales; no observation pass\n";
  }

  for (const SiteInfo& s : quantizer_sites(m.config, m.plan)) {
    auto it = m.steps.find(s.name);
    if (it == m.steps.end()) continue;
    const Tensor& st = it->second;
    double mean = 0.0;
    for (std::size_t i = 0; i < st.numel(); ++i) mean += st[i];
    mean /= static_cast<double>(st.numel());
    out << "site " << s.name << " bits " << s.bits << " scales "
        << st.numel() << " mean_step " << std::setprecision(6) << mean
        << "\n";
  }

  Checkpoint ck = checkpoint_from_model(m, src.seed);
  save_checkpoint_file(cfg.output_path, ck);
  out << "wrote " << cfg.output_path << "\n";
}

/// Train (QAT with distillation, or plain pretraining) and write the
/// resulting checkpoint, plus optional metric and resolved-config echoes.
inline void cmd_train(const RunConfig& cfg, std::ostream& out) {
  check_input(!cfg.output_path.empty(), "train: paths.output is required");
  TrainConfig tc = cfg.train;

  std::uint64_t lineage = tc.seed;
  QuantizedModel* teacher_ptr = nullptr;
  std::optional<QuantizedModel> teacher;
  std::optional<QuantizedModel> student;

  if (cfg.input_path.empty()) {
    Rng rng(tc.seed);
    student.emplace(cfg.model, cfg.plan, rng);
  } else {
    const Checkpoint ck = load_checkpoint_file(cfg.input_path);
    student.emplace(model_from_checkpoint(ck));
    lineage = ck.seed;
  }
  check_input(tc.seq_len <= student->config.max_seq,
              "train: seq_len exceeds the model context window");

  if (cfg.train_mode == "pretrain") {
    tc.kd_ratio = 0.0f;
    tc.mixture_ratio = 1.0f;
  } else if (tc.kd_ratio > 0.0f) {
    check_input(!cfg.teacher_path.empty(),
                "train: kd_ratio > 0 requires paths.teacher");
    teacher.emplace(detail::model_from_file(cfg.teacher_path));
    teacher_ptr = &*teacher;
  }

  const Corpus pretrain = load_corpus(cfg.pretrain_corpus);
  const Corpus tuning = cfg.train_mode == "pretrain"
                            ? pretrain
                            : load_corpus(cfg.tuning_corpus);

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics: " + cfg.metrics_path);
  }
  const std::size_t log_every =
      tc.steps == 0 ? 1 : std::max<std::size_t>(1, tc.steps / 10);

  TrainResult res = train_qat(
      *student, teacher_ptr, pretrain, tuning, tc,
      [&](const StepRecord& r) {
        if (metrics.is_open()) {
          const json line{{"grad_norm", r.grad_norm},
                          {"loss", r.loss},
                          {"lr", r.lr},
                          {"step", r.step}};
          metrics << line.dump() << "\n";
        }
        if (r.step % log_every == 0 || r.step + 1 == tc.steps)
          out << "step " << r.step << " loss " << r.loss << " lr " << r.lr
              << " grad_norm " << r.grad_norm << "\n";
      });
  if (metrics.is_open()) {
    metrics.flush();
    if (!metrics.good())
      throw IoError("short write on metrics: " + cfg.metrics_path);
  }

  Checkpoint ck = checkpoint_from_model(*student, lineage);
  save_checkpoint_file(cfg.output_path, ck);

  if (!cfg.echo_path.empty()) {
    RunConfig echo = cfg;
    echo.train = tc;
    echo.train.base_lr = resolve_peak_lr(tc);
    echo.train.auto_lr = false;
    std::ofstream ef(cfg.echo_path, std::ios::trunc);
    if (!ef) throw IoError("cannot write config echo: " + cfg.echo_path);
    ef << dump_run_config(echo);
    if (!ef.good())
      throw IoError("short write on config echo: " + cfg.echo_path);
  }

  out << "trained " << tc.steps << " steps, final loss " << res.final_loss
      << ", wrote " << cfg.output_path << "\n";
}

/// Held-out perplexity of a checkpoint at its own precision plan.
inline void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  check_input(!cfg.input_path.empty(), "eval: paths.input is required");
  QuantizedModel m = detail::model_from_file(cfg.input_path);
  const Corpus hold = load_corpus(cfg.holdout_corpus);

  std::vector<std::vector<std::size_t>> docs;
  docs.reserve(hold.docs.size());
  for (const auto& d : hold.docs)
    docs.push_back(detail::fit_doc(d, m.config.max_seq));

  const double ppl =
      eval_perplexity(m, docs, kPadToken, RunMode::kQuantized);
  const double mean_loss = std::log(ppl);
  out << std::setprecision(10) << "perplexity " << ppl << " mean_loss "
      << mean_loss << " docs " << docs.size() << "\n";

  if (!cfg.metrics_path.empty()) {
    std::ofstream mf(cfg.metrics_path, std::ios::trunc);
    if (!mf) throw IoError("cannot write metrics: " + cfg.metrics_path);
    const json line{{"docs", docs.size()},
                    {"mean_loss", mean_loss},
                    {"perplexity", ppl}};
    mf << line.dump() << "\n";
    if (!mf.good())
      throw IoError("short write on metrics: " + cfg.metrics_path);
  }
}

/// Quantize weights to integer codes, write the artifact, then reload it
/// and require the dequantized forward to match the fake-quant forward.
inline void cmd_export(const RunConfig& cfg, std::ostream& out) {
  check_input(!cfg.input_path.empty(), "export: paths.input is required");
  check_input(!cfg.output_path.empty(), "export: paths.output is required");

  const Checkpoint src = load_checkpoint_file(cfg.input_path);
  QuantizedModel m = model_from_checkpoint(src);
  Checkpoint art = export_from_model(m, src.seed);
  save_checkpoint_file(cfg.output_path, art);

  QuantizedModel back =
      model_from_checkpoint(load_checkpoint_file(cfg.output_path));

  Rng rng(cfg.train.seed);
  const std::size_t len = std::min<std::size_t>(16, m.config.max_seq);
  float max_diff = 0.0f;
  for (int p = 0; p < 16; ++p) {
    std::vector<std::size_t> tokens(len);
    for (auto& t : tokens) t = rng.index(m.config.vocab_size);
    const Tensor a = detail::model_logits(m, tokens, RunMode::kQuantized);
    const Tensor b = detail::model_logits(back, tokens, RunMode::kQuantized);
    check_shape(a.same_shape(b), "export: logit shape mismatch");
    for (std::size_t i = 0; i < a.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  }
  if (max_diff > 1e-5f)
    throw ExportParityError(
        "export parity failure: max logit difference " +
        std::to_string(max_diff));

  const auto file_bytes = std::filesystem::file_size(cfg.output_path);
  out << "wrote " << cfg.output_path << " (" << file_bytes
      << " bytes, payload " << checkpoint_payload_bytes(art)
      << " bytes, max logit difference " << max_diff << ")\n";
}

/// Compare two checkpoints' weights as rotation + residual per layer and
/// write the report as TSV.
inline void cmd_analyze_rotation(const RunConfig& cfg, std::ostream& out) {
  check_input(!cfg.teacher_path.empty(),
              "analyze-rotation: paths.teacher (reference weights) is "
              "required");
  check_input(!cfg.input_path.empty(),
              "analyze-rotation: paths.input is required");

  QuantizedModel before = detail::model_from_file(cfg.teacher_path);
  QuantizedModel after = detail::model_from_file(cfg.input_path);

  const auto entries = decompose_model_weights(
      before, after, cfg.rotation_allow_reflection);
  const RotationReport report =
      aggregate_report(entries, cfg.rotation_exclude_double_rotated);

  if (!cfg.report_path.empty()) {
    std::ofstream rf(cfg.report_path, std::ios::trunc);
    if (!rf) throw IoError("cannot write report: " + cfg.report_path);
    write_rotation_report(rf, report);
    if (!rf.good())
      throw IoError("short write on report: " + cfg.report_path);
    out << "wrote " << cfg.report_path << "\n";
  } else {
    write_rotation_report(out, report);
  }
  for (const TypeAverage& avg : report.averages)
    out << "mean " << avg.type << " rot " << std::setprecision(6) << avg.rot
        << " non_rot " << avg.non_rot << " (" << avg.count << " layers)\n";
}

}  // namespace silq
