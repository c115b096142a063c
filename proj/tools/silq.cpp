// SPDX-License-Identifier: Apache-2.0
//
// Command line front end. Subcommands mirror the training workflow:
// calibrate, train, eval, export, analyze-rotation. Every subcommand takes
// --config <path>; --seed, --steps, and --auto-lr override the file.
//
// Exit codes: 0 success, 2 bad input or usage, 3 training divergence,
// 4 export parity failure, 1 anything else.

#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "silq/commands.hpp"
#include "silq/config.hpp"
#include "silq/error.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::uint64_t steps = 0;
  bool has_steps = false;
  bool auto_lr = false;
};

void add_common_options(CLI::App* sub, Overrides& ov) {
  sub->add_option("--config", ov.config_path, "run configuration (JSON)")
      ->required();
  sub->add_option("--seed", ov.seed, "override the training seed")
      ->trigger_on_parse()
      ->each([&ov](const std::string&) { ov.has_seed = true; });
  sub->add_option("--steps", ov.steps, "override the training step count")
      ->trigger_on_parse()
      ->each([&ov](const std::string&) { ov.has_steps = true; });
  sub->add_flag("--auto-lr", ov.auto_lr,
                "rescale the peak learning rate for the step count");
}

silq::RunConfig resolve_config(const Overrides& ov) {
  silq::RunConfig cfg = silq::load_run_config(ov.config_path);
  if (ov.has_seed) cfg.train.seed = ov.seed;
  if (ov.has_steps) cfg.train.steps = static_cast<std::size_t>(ov.steps);
  if (ov.auto_lr) cfg.train.auto_lr = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale quantization-aware training toolkit"};
  app.require_subcommand(1);

  Overrides ov;
  std::map<std::string,
           std::function<void(const silq::RunConfig&, std::ostream&)>>
      handlers = {
          {"calibrate", silq::cmd_calibrate},
          {"train", silq::cmd_train},
          {"eval", silq::cmd_eval},
          {"export", silq::cmd_export},
          {"analyze-rotation", silq::cmd_analyze_rotation},
      };
  add_common_options(
      app.add_subcommand("calibrate",
                         "fit quantizer step sizes for a checkpoint"),
      ov);
  add_common_options(
      app.add_subcommand("train", "run quantization-aware training"), ov);
  add_common_options(
      app.add_subcommand("eval", "score a checkpoint on held-out text"), ov);
  add_common_options(
      app.add_subcommand("export", "write an integer artifact and verify it"),
      ov);
  add_common_options(
      app.add_subcommand("analyze-rotation",
                         "decompose weight drift into rotation + residual"),
      ov);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const silq::RunConfig cfg = resolve_config(ov);
    for (const auto& [name, fn] : handlers)
      if (app.got_subcommand(name)) {
        fn(cfg, std::cout);
        return 0;
      }
    std::cerr << "silq: no subcommand\n";
    return 2;
  } catch (const silq::DivergenceError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 3;
  } catch (const silq::ExportParityError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 4;
  } catch (const silq::ShapeError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 2;
  } catch (const silq::InputError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 2;
  } catch (const silq::UsageError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 2;
  } catch (const silq::IoError& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "silq: " << e.what() << "\n";
    return 1;
  }
}
