#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adafocus/pipeline.hpp"

namespace adafocus {

enum class EvalMode { kOnline, kOffline };
std::string_view to_string(EvalMode mode);
EvalMode parse_eval_mode(std::string_view name);

struct EvalOptions {
  EvalMode mode = EvalMode::kOnline;
  PolicyVariant policy = PolicyVariant::kLearned;
  bool use_skip = false;
  std::optional<double> rho;
  std::uint64_t seed = 0;
  std::string label;  // free-form tag copied into the record
  std::optional<double> eta;  // informational, for sweep records
};

struct MetricsRecord {
  std::string label;
  std::string policy;
  std::string mode;
  int patch_size = 0;
  std::optional<double> eta;
  int num_samples = 0;
  double top1 = 0.0;
  double mean_flops = 0.0;  // multiply-adds per video
  double mean_glance = 0.0, mean_focus = 0.0, mean_patch_policy = 0.0, mean_skip_policy = 0.0,
         mean_classifier = 0.0;
  std::vector<double> per_frame_accuracy;  // online: accuracy after t frames
  std::optional<double> keep_rate;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct Scores {
  double top1 = 0.0;
  std::vector<double> per_frame_accuracy;
};

/// Top-1 of the last column and, when every matrix has T columns, the
/// accuracy after each frame count.
Scores score_predictions(std::span<const nn::Matrix<float>> probs, std::span<const int> labels);

/// Deterministic given options.seed; sample i uses derive_seed(seed, i).
MetricsRecord evaluate(const ModelBundle& bundle, const DatasetSplit& split,
                       const EvalOptions& options);

/// Learned policy on `learned_model`; random, central and gaussian on
/// `fixed_model` (pass the same bundle to hold the model constant). The
/// glance networks and configs must match.
std::vector<MetricsRecord> ablate_policies(const ModelBundle& learned_model,
                                           const ModelBundle& fixed_model,
                                           const DatasetSplit& split, std::uint64_t seed);

/// Bundles must differ only in feature_reuse.
std::pair<MetricsRecord, MetricsRecord> ablate_feature_reuse(const ModelBundle& reuse_on,
                                                             const ModelBundle& reuse_off,
                                                             const DatasetSplit& split,
                                                             std::uint64_t seed);

/// For each bundle and eta: calibrate rho on `calibration` (eta = 1 keeps
/// every frame) and evaluate online on `split`. Bundles without a skip gate
/// yield one all-keep record each.
std::vector<MetricsRecord> tradeoff_sweep(std::vector<ModelBundle>& bundles,
                                          const DatasetSplit& calibration,
                                          const DatasetSplit& split, std::span<const double> etas,
                                          std::uint64_t seed);

struct SelectionRecord {
  int sample = 0;
  int frame = 0;
  int candidate = 0;
  PatchOffset offset;
  GlyphPos glyph;
  bool kept = true;
  double overlap = 0.0;  // fraction of glyph pixels inside the patch
};

/// Fraction of the glyph box covered by the patch.
double glyph_overlap(PatchOffset patch, int patch_size, GlyphPos glyph, int glyph_size);

std::vector<SelectionRecord> export_selections(const ModelBundle& bundle, const DatasetSplit& split,
                                               PolicyVariant policy, std::uint64_t seed);
double overlap_rate(std::span<const SelectionRecord> records);

std::string metrics_to_json(std::span<const MetricsRecord> records);
/// Inverse of metrics_to_json. Malformed input is a FormatError.
std::vector<MetricsRecord> metrics_from_json(const std::string& text);
std::string metrics_to_csv(std::span<const MetricsRecord> records);
std::string selections_to_csv(std::span<const SelectionRecord> records);

/// Writes tradeoff.{csv,svg} and online_curve.{csv,svg} into `out_dir`.
/// An empty record set is an error and writes nothing.
std::vector<std::string> emit_plots(std::span<const MetricsRecord> records,
                                    const std::string& out_dir);

}  // namespace adafocus
