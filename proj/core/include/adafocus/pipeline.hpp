#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adafocus/bundle.hpp"
#include "adafocus/rltrain.hpp"

namespace adafocus {

enum class Stage { kPretrain, kStage1, kStage2, kStage3 };
std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);

struct StageConfig {
  Stage stage = Stage::kStage1;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.05;  // SGD base rate for backbones and classifier
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // Per-component global gradient-norm clip for the SGD stages; 0 disables.
  double max_grad_norm = 5.0;
  // stage3: also fine-tune the focus network
  bool train_focus = false;
  // stage3: sample patches from the policy (false: argmax)
  bool sample_policy = true;
  // stage3 with the skip gate: each video keeps a fraction of frames drawn
  // from [min_keep_fraction, 1], via thresholds solved on the training split
  double min_keep_fraction = 0.5;
  // stage2
  PpoConfig ppo;
  RewardKind reward = RewardKind::kAdaFocus;
  double skip_lambda = 1e-6;

  /// Desk-scale defaults per stage (pretrain 12, stage1 5, stage2 15,
  /// stage3 5 epochs).
  static StageConfig defaults(Stage stage);
  void validate() const;
};

/// Components a stage may modify. The others are checked unchanged.
std::vector<Component> trainable_components(const StageConfig& cfg, const BundleConfig& bundle);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;     // training accuracy of p_T (pretrain: glance probe)
  double aux_accuracy = 0.0;  // pretrain: focus probe
  double mean_return = 0.0;  // stage2: mean R_1 of the patch policy
  double keep_rate = 1.0;    // stage2/3 with the skip gate
  double clip_fraction = 0.0;
};

struct StageReport {
  Stage stage = Stage::kStage1;
  std::vector<EpochLog> epochs;
  /// Throwaway probe heads from pretraining (glance and focus).
  std::optional<nn::Linear<float>> glance_probe;
  std::optional<nn::Linear<float>> focus_probe;
};

using EpochCallback = std::function<void(Stage, const EpochLog&)>;

/// f_G on full frames and f_L on glyph-centred patches, each with its own
/// linear probe (max-pooled glance maps, average-pooled focus maps). One
/// random frame per video per step.
StageReport pretrain(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                     std::uint64_t seed, const EpochCallback& log = {});

/// Accuracy of the glance probe from `pretrain` on single frames (t = 0).
double glance_probe_accuracy(const ModelBundle& bundle, const nn::Linear<float>& probe,
                             const DatasetSplit& split);

/// Trains f_L and f_C on uniformly random in-bounds patches, loss averaged
/// over all time steps. f_G is frozen.
StageReport stage1_warmup(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                          std::uint64_t seed, const EpochCallback& log = {});

/// PPO on the patch policy and, when present, the skip gate. Backbones and
/// classifier are frozen.
StageReport stage2_policy_learning(ModelBundle& bundle, const DatasetSplit& train,
                                   const StageConfig& cfg, std::uint64_t seed,
                                   const EpochCallback& log = {});

/// Fine-tunes f_C (and optionally f_L) on patches chosen by the learned
/// policy. Skipped frames feed zeros in place of the local features.
StageReport stage3_finetune(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                            std::uint64_t seed, const EpochCallback& log = {});

/// Dispatches on cfg.stage, verifies the freeze contract and appends the
/// stage tag to the bundle lineage.
StageReport run_stage(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                      std::uint64_t seed, const EpochCallback& log = {});

/// Keep scores of the skip gate on every frame of `split`.
std::vector<double> skip_scores(const ModelBundle& bundle, const DatasetSplit& split);

/// Solves rho on `split` for keep fraction eta and stores it in the bundle.
Calibration calibrate(ModelBundle& bundle, const DatasetSplit& split, double eta);

// ---- inference ----

enum class PolicyVariant { kLearned, kRandom, kCentral, kGaussian };
std::string_view to_string(PolicyVariant v);
PolicyVariant parse_policy_variant(std::string_view name);

struct InferenceOptions {
  PolicyVariant policy = PolicyVariant::kLearned;
  bool use_skip = false;  // threshold the skip gate at rho
  std::optional<double> rho;  // overrides the bundle's calibrated rho
  std::uint64_t seed = 0;     // drives the random and gaussian variants
  bool parallel_focus = true;  // offline: one batched f_L pass
};

struct InferenceResult {
  nn::Matrix<float> probs;  // online: [classes x T]; offline: [classes x 1]
  std::vector<int> patches;
  std::vector<bool> kept;
  CostLedger ledger;

  int prediction() const;  // argmax of the last column
};

/// Frame-by-frame recognizer. Each push consumes one frame and emits p_t.
class OnlineSession {
 public:
  OnlineSession(const ModelBundle& bundle, const InferenceOptions& options);

  nn::Matrix<float> push(std::span<const float> frame);
  int steps() const { return steps_; }
  const std::vector<int>& patches() const { return patches_; }
  const std::vector<bool>& kept() const { return kept_; }
  CostLedger ledger() const;

 private:
  const ModelBundle& bundle_;
  InferenceOptions options_;
  double rho_ = 0.0;
  Rng rng_;
  nn::Matrix<float> patch_state_, skip_state_;
  nn::ClassifierState<float> classifier_state_;
  std::vector<int> patches_;
  std::vector<bool> kept_;
  int steps_ = 0;
};

InferenceResult infer_online(const ModelBundle& bundle, const VideoSample& sample,
                             const InferenceOptions& options = {});
/// All glance passes, then the policy recurrences, then the focus passes
/// (batched when parallel_focus), then the classifier. Returns p_T only.
InferenceResult infer_offline(const ModelBundle& bundle, const VideoSample& sample,
                              const InferenceOptions& options = {});

/// Candidate index chosen by a fixed (non-learned) variant.
int fixed_policy_choice(const PatchGrid& grid, PolicyVariant variant, Rng& rng);

// ---- full training chain ----

struct TrainingPlan {
  BundleConfig bundle;
  bool skip_pretrain = false;
  StageConfig pretrain = StageConfig::defaults(Stage::kPretrain);
  StageConfig stage1 = StageConfig::defaults(Stage::kStage1);
  StageConfig stage2 = StageConfig::defaults(Stage::kStage2);
  StageConfig stage3 = StageConfig::defaults(Stage::kStage3);
};

struct TrainedModels {
  ModelBundle stage1;  // snapshot after stage1, used for fixed-policy baselines
  ModelBundle final;   // after stage3
  std::vector<StageReport> reports;
};

TrainedModels train_all(const TrainingPlan& plan, const DatasetSplit& train, std::uint64_t seed,
                        const EpochCallback& log = {});

}  // namespace adafocus
