#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adafocus/experiment.hpp"

namespace {

namespace fs = std::filesystem;
using namespace adafocus;

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kContract = 3,
  kTraining = 4,
  kFormat = 5,
};

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_dir;
  bool overwrite = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("-c,--config", a.config_path, "INI config file (defaults apply when omitted)");
  cmd->add_option("-s,--set", a.overrides, "Override a key: section.key=value (repeatable)");
  cmd->add_option("-r,--run-dir", a.run_dir, "Run directory (default: <runs_dir>/<hash>-s<seed>)");
  cmd->add_flag("--overwrite", a.overwrite, "Replace existing outputs");
  cmd->add_flag("-q,--quiet", a.quiet, "No progress output");
}

CommandContext make_context(const CommonArgs& a) {
  CommandContext ctx;
  ctx.config = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
  for (const auto& o : a.overrides) apply_override(ctx.config, o);
  ctx.config.validate();
  ctx.dir = a.run_dir.empty() ? run_directory_for(ctx.config) : RunDirectory{a.run_dir};
  ctx.overwrite = a.overwrite;
  ctx.log = a.quiet ? nullptr : &std::cerr;
  return ctx;
}

int run(int argc, char** argv) {
  CLI::App app{"Adaptive patch-focus video recognition: data generation, training, evaluation"};
  app.require_subcommand(1);
  CommonArgs common;

  struct Simple {
    const char* name;
    const char* help;
  };
  const Simple simple[] = {
      {"gen-data", "Generate train, calibration and test splits"},
      {"pretrain", "Pretrain the glance and focus networks"},
      {"stage1", "Warm up focus network and classifier on random patches"},
      {"stage2", "Train the patch policy (and skip gate) with PPO"},
      {"stage3", "Fine-tune the classifier on policy-selected patches"},
      {"calibrate", "Solve the skip threshold for eval.calibration_eta"},
      {"eval", "Evaluate the final model on the test split"},
      {"ablate", "Compare learned, random, central and gaussian patch policies"},
      {"plot", "Render plots from the metrics in the run directory"},
      {"run", "gen-data through plot in one go"},
      {"show-config", "Print the resolved config and run directory"},
  };
  std::vector<std::pair<std::string, CLI::App*>> cmds;
  for (const auto& s : simple) {
    auto* c = app.add_subcommand(s.name, s.help);
    add_common(c, common);
    cmds.emplace_back(s.name, c);
  }

  auto* sweep = app.add_subcommand("sweep", "Accuracy vs compute over eval.etas");
  add_common(sweep, common);
  std::vector<std::string> extra_runs;
  sweep->add_option("--extra-run", extra_runs, "Another run directory to include (e.g. a different patch size)");

  auto* verify = app.add_subcommand("verify", "Gradient, reward, consistency, calibration and PPO checks");
  std::string verify_checkpoint;
  VerifyOptions vo;
  verify->add_option("--checkpoint", verify_checkpoint, "Check this bundle instead of a fresh one");
  verify->add_option("--projections", vo.grad.projections, "Random projections per gradient check");
  verify->add_option("--seed", vo.seed, "Seed for models, data and projections");
  verify->add_option("--samples", vo.consistency_samples, "Samples for the consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (verify->parsed()) {
      std::optional<fs::path> ckpt;
      if (!verify_checkpoint.empty()) ckpt = verify_checkpoint;
      const auto results = cmd_verify(vo, ckpt, &std::cout);
      int failed = 0;
      for (const auto& r : results) failed += r.passed ? 0 : 1;
      std::cout << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
      return failed == 0 ? kOk : kContract;
    }
    const auto ctx = make_context(common);
    if (sweep->parsed()) {
      std::vector<fs::path> extra(extra_runs.begin(), extra_runs.end());
      cmd_sweep(ctx, extra);
      return kOk;
    }
    std::string name;
    for (const auto& [n, c] : cmds) {
      if (c->parsed()) name = n;
    }
    if (name == "show-config") {
      std::cout << "# run directory: " << ctx.dir.root.string() << "\n" << render_config(ctx.config);
    } else if (name == "gen-data") {
      cmd_gen_data(ctx);
    } else if (name == "pretrain" || name == "stage1" || name == "stage2" || name == "stage3") {
      cmd_stage(ctx, parse_stage(name));
    } else if (name == "calibrate") {
      cmd_calibrate(ctx);
    } else if (name == "eval") {
      const auto r = cmd_eval(ctx);
      std::cout << metrics_to_csv(std::span(&r, 1));
    } else if (name == "ablate") {
      cmd_ablate(ctx);
    } else if (name == "plot") {
      cmd_plot(ctx);
    } else if (name == "run") {
      cmd_run_all(ctx);
    }
    if (ctx.log && name != "show-config") *ctx.log << "run directory: " << ctx.dir.root.string() << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kContract;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kTraining;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
