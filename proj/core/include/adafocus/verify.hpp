#pragma once

#include <string>
#include <vector>

#include "adafocus/pipeline.hpp"

namespace adafocus {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured quantity (error, difference, probability)
  double tolerance = 0.0;  // pass threshold for `value`
  std::string detail;
};

/// "PASS name value=... tol=... detail" on one line.
std::string format_check(const CheckResult& r);

struct GradCheckOptions {
  int projections = 20;
  double step = 1e-6;
  double tolerance = 1e-3;
  std::uint64_t seed = 1;
};

/// Central-difference checks of every trainable component in 64-bit mode:
/// directional derivatives along random projections of all parameters
/// (and inputs where the component back-propagates to them). Backbone
/// directions whose probes cross a ReLU kink are redrawn.
std::vector<CheckResult> gradient_checks(const GradCheckOptions& options = {});

/// Brute force over all K candidates with an exact-expectation baseline:
/// |mean reward| per (sample, frame, random prefix) triple, max over triples.
CheckResult reward_zero_mean_check(const ModelBundle& bundle, const DatasetSplit& split, int triples,
                                   std::uint64_t seed);

/// Max |online p_T - offline p_T| over the first n samples.
CheckResult online_offline_check(const ModelBundle& bundle, const DatasetSplit& split, int n,
                                 bool use_skip = false);

/// Kept fraction on `split` after calibrating for each eta lies in
/// [eta, eta + 1/N].
std::vector<CheckResult> calibration_checks(ModelBundle& bundle, const DatasetSplit& split,
                                            std::span<const double> etas);

/// Two-armed bandit (+1 / -1) trained with ppo_update; passes when
/// P(best arm) >= 0.95 after `updates` updates.
CheckResult bandit_check(std::uint64_t seed, int updates = 200);

}  // namespace adafocus
