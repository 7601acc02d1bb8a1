#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "adafocus/config.hpp"
#include "adafocus/verify.hpp"

namespace adafocus {

/// Layout of one run directory:
///   config.ini      resolved config
///   manifest.json   seed, config hash, lineage, data and checkpoint hashes
///   data/           <role>.afsplit (+ .manifest)
///   checkpoints/    <stage>.afck, calibrated.afck
///   metrics/        *.json, *.csv
///   plots/          *.svg with their backing *.csv
struct RunDirectory {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.ini"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path split(SplitRole role) const;
  std::filesystem::path checkpoint(const std::string& name) const;
  std::filesystem::path metrics(const std::string& file) const { return root / "metrics" / file; }
  std::filesystem::path plots() const { return root / "plots"; }
};

struct CommandContext {
  RunConfig config;
  RunDirectory dir;
  bool overwrite = false;
  std::ostream* log = nullptr;  // progress lines; null is silent
};

/// Run directory for a config: runs_dir / run_dir_name(config).
RunDirectory run_directory_for(const RunConfig& config);

/// Writes config.ini, or checks an existing one matches the resolved config.
void open_run(const CommandContext& ctx);

void cmd_gen_data(const CommandContext& ctx);
/// Reads the previous stage's checkpoint (pretrain starts from a fresh
/// bundle; stage1 starts fresh when pretraining is skipped).
void cmd_stage(const CommandContext& ctx, Stage stage);
void cmd_calibrate(const CommandContext& ctx);
MetricsRecord cmd_eval(const CommandContext& ctx);

struct AblationOutcome {
  std::vector<MetricsRecord> policies;  // learned, random, central, gaussian
  double overlap_learned = 0.0;
  double overlap_random = 0.0;
};
AblationOutcome cmd_ablate(const CommandContext& ctx);

/// Sweeps eval.etas on this run's final model plus any extra run
/// directories' final models.
std::vector<MetricsRecord> cmd_sweep(const CommandContext& ctx,
                                     const std::vector<std::filesystem::path>& extra_runs = {});
std::vector<std::string> cmd_plot(const CommandContext& ctx);

/// gen-data through plot. Calibration and the sweep only run with the skip gate.
void cmd_run_all(const CommandContext& ctx);

struct VerifyOptions {
  GradCheckOptions grad;
  int reward_triples = 50;
  int consistency_samples = 100;
  std::uint64_t seed = 0;
};

/// Property checks on a small freshly built model, or on the run's final
/// checkpoint when `bundle_path` is given.
std::vector<CheckResult> cmd_verify(const VerifyOptions& options,
                                    const std::optional<std::filesystem::path>& bundle_path,
                                    std::ostream* log);

}  // namespace adafocus
