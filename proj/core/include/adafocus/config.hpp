#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adafocus/evalbench.hpp"

namespace adafocus {

struct SplitSizes {
  int train = 2000;
  int calibration = 200;
  int test = 500;
};

struct EvalSettings {
  EvalMode mode = EvalMode::kOnline;
  PolicyVariant policy = PolicyVariant::kLearned;
  bool use_skip = false;
  // Fixed-policy baselines run on the final model instead of the stage1 snapshot.
  bool hold_model_constant = false;
  std::vector<double> etas{1.0, 0.9, 0.7, 0.5};
  double calibration_eta = 0.5;
  int consistency_samples = 100;
};

/// Everything a run needs. Serialized as INI: sections run, data, model,
/// pretrain, stage1, stage2, stage3, eval.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string runs_dir = "runs";
  SynthConfig data;
  SplitSizes sizes;
  TrainingPlan plan;
  EvalSettings eval;

  RunConfig();
  /// Copies shared values (channels, frame size, classes, stage patch size)
  /// from data into the model and stage configs.
  void sync();
  void validate() const;
};

/// Parses INI text. Unknown sections or keys are a ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Applies "section.key=value".
void apply_override(RunConfig& config, const std::string& assignment);

/// Canonical INI listing every key, in a fixed order.
std::string render_config(const RunConfig& config);

/// Hash of the rendered config with the seed and runs_dir excluded.
std::uint64_t config_hash(const RunConfig& config);

/// "<first 12 hex digits of config_hash>-s<seed>".
std::string run_dir_name(const RunConfig& config);

/// Known "section.key" names, in render order.
std::vector<std::string> config_keys();

/// Parses "16x3/1,32x3/2": out_channels x kernel / stride per layer, ReLU.
nn::ConvBackboneSpec parse_backbone(const std::string& text, int input_channels);
std::string format_backbone(const nn::ConvBackboneSpec& spec);

}  // namespace adafocus
