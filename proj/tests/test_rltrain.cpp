#include <doctest.h>

#include <cmath>
#include <vector>

#include "adafocus/bundle.hpp"
#include "adafocus/rltrain.hpp"
#include "adafocus/synthdata.hpp"
#include "adafocus/verify.hpp"

using namespace adafocus;

namespace {

struct Small {
  SynthConfig data;
  BundleConfig bundle;
  Small(bool plus) {
    data.frame_size = 32;
    data.frames = 4;
    bundle.frame_size = 32;
    bundle.patch_size = 16;
    bundle.grid_k = 3;
    bundle.adafocus_plus = plus;
  }
};

std::vector<EpisodeTrace> some_traces(const ModelBundle& b, const DatasetSplit& split,
                                      const RolloutOptions& opt) {
  std::vector<EpisodeTrace> out;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    out.push_back(rollout_stage2(b, s, compute_glance(b, s), opt, 100 + i));
  }
  return out;
}

}  // namespace

TEST_CASE("patch reward") {
  CHECK(patch_reward(0.6, 0.6) == 0.0);
  CHECK(patch_reward(0.9, 0.6) == doctest::Approx(0.3));
}

TEST_CASE("skip reward") {
  SkipRewardConfig cfg;
  cfg.lambda = 1e-6;
  cfg.patch_size = 128;
  CHECK(skip_reward(false, 0.9, 0.1, cfg) == 0.0);
  CHECK(skip_reward(true, 0.7, 0.5, cfg) == doctest::Approx(0.183616));
  CHECK(skip_reward(true, 0.5, 0.5, cfg) == doctest::Approx(-0.016384));
}

TEST_CASE("discounted returns") {
  const std::vector<double> ones{1, 1, 1};
  const auto r = discounted_returns(ones, 0.7);
  CHECK(r[0] == doctest::Approx(2.19));
  CHECK(r[1] == doctest::Approx(1.7));
  CHECK(r[2] == doctest::Approx(1.0));

  const std::vector<double> single{0.42};
  CHECK(discounted_returns(single, 0.7) == single);

  const std::vector<double> two{0.5, -0.2};
  const auto r2 = discounted_returns(two, 0.7);
  CHECK(r2[0] == doctest::Approx(0.36));
  CHECK(r2[1] == doctest::Approx(-0.2));

  // The recursion is exact in floating point.
  const std::vector<double> mixed{0.13, -0.71, 0.05, 0.9};
  const auto rm = discounted_returns(mixed, 0.7);
  for (std::size_t t = 0; t + 1 < rm.size(); ++t) CHECK(rm[t] == mixed[t] + 0.7 * rm[t + 1]);
}

TEST_CASE("threshold calibration") {
  const std::vector<double> s{0.9, 0.8, 0.1, 0.05};
  const auto c = calibrate_threshold(s, 0.5);
  CHECK(c.rho == 0.8);
  CHECK(c.kept_fraction == 0.5);
  CHECK_FALSE(c.degenerate);

  const std::vector<double> same(10, 0.3);
  const auto d = calibrate_threshold(same, 0.5);
  CHECK(d.rho == 0.3);
  CHECK(d.kept_fraction == 1.0);
  CHECK(d.degenerate);

  const std::vector<double> empty;
  CHECK_THROWS_AS(calibrate_threshold(empty, 0.5), ContractError);

  Rng rng(5);
  std::vector<double> many(203);
  for (auto& v : many) v = rng.uniform();
  for (double eta : {0.9, 0.7, 0.5}) {
    const auto k = calibrate_threshold(many, eta);
    CHECK(k.kept_fraction >= eta);
    CHECK(k.kept_fraction <= eta + 1.0 / many.size() + 1e-12);
  }
}

TEST_CASE("rollout traces") {
  Small cfg(true);
  const auto bundle = ModelBundle::create(cfg.bundle, 3);
  const auto split = generate_split(cfg.data, 10, SplitRole::kTrain, 4);
  const auto& s = split.samples[0];
  const auto g = compute_glance(bundle, s);

  SUBCASE("plain rollout has no skip records") {
    const auto t = rollout_stage2(bundle, s, g, {}, 1);
    CHECK_FALSE(t.has_skip);
    for (const auto& f : t.frames) {
      CHECK_FALSE(f.skip.has_value());
      CHECK_FALSE(f.p_ty_keep.has_value());
      CHECK_FALSE(f.p_ty_drop.has_value());
      CHECK(f.reward == doctest::Approx(patch_reward(f.p_ty_selected, f.p_ty_baseline)));
    }
  }
  SUBCASE("same seed replays the same trace") {
    RolloutOptions opt;
    opt.use_skip = true;
    const auto a = rollout_stage2(bundle, s, g, opt, 9);
    const auto b = rollout_stage2(bundle, s, g, opt, 9);
    CHECK(format_trace(a) == format_trace(b));
    CHECK(a.probs == b.probs);
  }
  SUBCASE("forcing every keep reproduces the plain trajectory") {
    RolloutOptions forced;
    forced.use_skip = true;
    forced.force_keep = true;
    const auto a = rollout_stage2(bundle, s, g, {}, 5);
    const auto b = rollout_stage2(bundle, s, g, forced, 5);
    CHECK(a.probs == b.probs);
    for (std::size_t t = 0; t < a.frames.size(); ++t) {
      CHECK(a.frames[t].patch.index == b.frames[t].patch.index);
      CHECK(b.frames[t].skip->keep);
    }
  }
  SUBCASE("returns follow the recursion") {
    const auto t = rollout_stage2(bundle, s, g, {}, 2);
    for (std::size_t i = 0; i + 1 < t.frames.size(); ++i) {
      CHECK(t.frames[i].ret == t.frames[i].reward + 0.7 * t.frames[i + 1].ret);
    }
  }
}

TEST_CASE("baseline-subtracted reward has zero mean over candidates") {
  Small cfg(false);
  const auto bundle = ModelBundle::create(cfg.bundle, 8);
  const auto split = generate_split(cfg.data, 10, SplitRole::kTrain, 6);
  const auto r = reward_zero_mean_check(bundle, split, 20, 7);
  INFO(format_check(r));
  CHECK(r.passed);
}

TEST_CASE("PPO update") {
  Small cfg(true);
  auto bundle = ModelBundle::create(cfg.bundle, 11);
  const auto split = generate_split(cfg.data, 10, SplitRole::kTrain, 12);
  RolloutOptions opt;
  opt.use_skip = true;
  const auto traces = some_traces(bundle, split, opt);
  PpoConfig ppo;

  SUBCASE("first epoch sees unit ratios") {
    for (auto kind : {PolicyKind::kPatch, PolicyKind::kSkip}) {
      auto& policy = kind == PolicyKind::kPatch ? bundle.patch_policy : *bundle.skip_policy;
      nn::AdamOptimizer<float> adam({ppo.learning_rate});
      const auto episodes = ppo_episodes(traces, kind);
      const auto stats = ppo_update(policy, adam, episodes, ppo);
      CHECK(stats.epochs.front().max_ratio_deviation < 1e-5);
      CHECK(stats.epochs.front().clip_fraction == 0.0);
      CHECK(stats.epochs.size() == 4);
    }
  }
  SUBCASE("zero advantages give no policy-gradient term") {
    const auto episodes = ppo_episodes(traces, PolicyKind::kPatch);
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.actions.size();
    const std::vector<double> zeros(n, 0.0);
    PpoConfig pg_only = ppo;
    pg_only.value_loss_coef = 0.0;
    pg_only.entropy_coef = 0.0;
    auto grad = bundle.patch_policy;
    nn::ParamList<float> grads;
    grad.collect(grads, "g");
    nn::zero_params(grads);
    ppo_loss(bundle.patch_policy, episodes, zeros, pg_only, &grad);
    for (const auto& g : grads) CHECK(g.value->cwiseAbs().maxCoeff() == 0.0f);

    // With the value term on, only the critic path moves.
    PpoConfig value_only = pg_only;
    value_only.value_loss_coef = 0.5;
    nn::zero_params(grads);
    ppo_loss(bundle.patch_policy, episodes, zeros, value_only, &grad);
    CHECK(grad.head.weight.cwiseAbs().maxCoeff() == 0.0f);
    CHECK(grad.value_head.weight.cwiseAbs().maxCoeff() > 0.0f);
  }
}

TEST_CASE("two-armed bandit converges to the better arm") {
  const auto r = bandit_check(0);
  INFO(format_check(r));
  CHECK(r.passed);
}

TEST_CASE("config validation") {
  PpoConfig p;
  p.clip_epsilon = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  SkipRewardConfig s;
  s.lambda = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
