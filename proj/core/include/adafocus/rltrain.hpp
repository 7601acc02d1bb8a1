#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adafocus/bundle.hpp"
#include "adafocus/optim.hpp"

namespace adafocus {

struct PpoConfig {
  double gamma = 0.7;
  double clip_epsilon = 0.2;
  int epochs_per_batch = 4;
  double value_loss_coef = 0.5;
  double entropy_coef = 0.01;
  double learning_rate = 3e-4;
  int batch_size = 32;
  double max_grad_norm = 0.5;

  void validate() const;
};

struct SkipRewardConfig {
  double lambda = 1e-6;
  int patch_size = 16;

  void validate() const;
};

/// Confidence with the chosen patch minus a random
/// patch's confidence, both from the same realized prefix.
double patch_reward(double p_ty_selected, double p_ty_baseline);

/// Keep: confidence gain of running the focus network minus lambda * P^2.
/// Skip: 0.
double skip_reward(bool keep, double p_ty_keep, double p_ty_drop, const SkipRewardConfig& cfg);

/// R_t = r_t + gamma * R_{t+1}, R_{T+1} = 0.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

enum class RewardKind { kAdaFocus, kConfidence, kIncrements };
std::string_view to_string(RewardKind kind);
RewardKind parse_reward_kind(std::string_view name);

struct FrameRecord {
  PatchAction patch;
  std::optional<SkipDecision> skip;
  int baseline_index = -1;
  double p_ty_selected = 0.0;
  double p_ty_baseline = 0.0;
  std::optional<double> p_ty_keep;
  std::optional<double> p_ty_drop;
  double p_ty_realized = 0.0;  // confidence after the realized step
  double reward = 0.0;
  double ret = 0.0;
  double value = 0.0;
  double skip_reward = 0.0;
  double skip_return = 0.0;
  double skip_value = 0.0;
};

struct EpisodeTrace {
  int label = 0;
  std::vector<FrameRecord> frames;
  std::vector<nn::Matrix<float>> glance_maps;  // policy inputs, one per frame
  nn::Matrix<float> probs;                     // realized p_t, [classes x T]
  bool has_skip = false;

  std::vector<bool> kept() const;
};

/// One line per frame: "t action b r R" (b is "-" without the skip gate).
std::string format_trace(const EpisodeTrace& trace);

struct RolloutOptions {
  SelectMode patch_mode = SelectMode::kSample;
  bool use_skip = false;   // requires a skip policy in the bundle
  bool force_keep = false;  // b_t = 1 for every frame (skip gate still runs)
  RewardKind reward = RewardKind::kAdaFocus;
  double gamma = 0.7;
  SkipRewardConfig skip;
};

/// Runs glance -> patch policy -> [skip gate] -> crop -> focus -> classify
/// for every frame with the backbones and classifier frozen. Baseline and
/// keep/drop branches are evaluated from copies of the classifier state, so
/// the realized trajectory is unaffected by them. Independent random
/// streams drive patch sampling, the baseline draw and the skip gate.
EpisodeTrace rollout_stage2(const ModelBundle& bundle, const VideoSample& sample,
                            const GlanceFeatures& glance, const RolloutOptions& options,
                            std::uint64_t seed);

/// Inputs for one policy's PPO update.
struct PpoEpisode {
  std::vector<nn::Matrix<float>> inputs;
  std::vector<int> actions;  // candidate index, or 0/1 for the skip gate
  std::vector<double> old_log_probs;
  std::vector<double> returns;
  std::vector<double> values;
};

std::vector<PpoEpisode> ppo_episodes(std::span<const EpisodeTrace> traces, PolicyKind kind);

struct PpoEpochStats {
  double surrogate = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double max_ratio_deviation = 0.0;  // max |ratio - 1|
  double max_clipped_ratio_deviation = 0.0;  // over the active clipped branch
};

struct PpoStats {
  std::vector<PpoEpochStats> epochs;
  const PpoEpochStats& last() const { return epochs.back(); }
};

/// Normalized advantages (R - v, mean 0, std 1 over the batch; only
/// centered when the spread is ~0), flattened in episode order.
std::vector<double> normalized_advantages(std::span<const PpoEpisode> episodes);

struct PpoLoss {
  double total = 0.0;
  PpoEpochStats stats;
};

/// Clipped surrogate + value regression - entropy bonus, averaged over all
/// steps; accumulates parameter gradients into `grad` when non-null.
template <typename S>
PpoLoss ppo_loss(const PolicyNet<S>& policy, std::span<const PpoEpisode> episodes,
                 std::span<const double> advantages, const PpoConfig& cfg,
                 PolicyNet<S>* grad);

/// epochs_per_batch full-batch Adam steps on the PPO loss.
PpoStats ppo_update(PolicyNet<float>& policy, nn::AdamOptimizer<float>& optimizer,
                    std::span<const PpoEpisode> episodes, const PpoConfig& cfg);

struct Calibration {
  double rho = 0.0;
  double kept_fraction = 0.0;
  bool degenerate = false;  // ties at rho pushed the kept fraction past the minimum
};

/// Smallest kept fraction >= eta with keep iff score >= rho; ties all kept.
Calibration calibrate_threshold(std::span<const double> scores, double eta);

extern template PpoLoss ppo_loss<float>(const PolicyNet<float>&, std::span<const PpoEpisode>,
                                        std::span<const double>, const PpoConfig&,
                                        PolicyNet<float>*);
extern template PpoLoss ppo_loss<double>(const PolicyNet<double>&, std::span<const PpoEpisode>,
                                         std::span<const double>, const PpoConfig&,
                                         PolicyNet<double>*);

}  // namespace adafocus
