#include <doctest.h>

#include <cmath>

#include "adafocus/pipeline.hpp"
#include "adafocus/synthdata.hpp"
#include "adafocus/verify.hpp"
#include "test_util.hpp"

using namespace adafocus;

namespace {

SynthConfig small_data(int frames = 4) {
  SynthConfig d;
  d.frame_size = 32;
  d.frames = frames;
  return d;
}

BundleConfig small_bundle(bool plus) {
  BundleConfig b;
  b.frame_size = 32;
  b.patch_size = 16;
  b.grid_k = 3;
  b.adafocus_plus = plus;
  return b;
}

StageConfig quick(Stage s) {
  auto c = StageConfig::defaults(s);
  c.epochs = 1;
  c.batch_size = 8;
  return c;
}

// One shared chain so the stage tests do not retrain from scratch.
struct Chain {
  DatasetSplit train = generate_split(small_data(), 40, SplitRole::kTrain, 1);
  DatasetSplit test = generate_split(small_data(), 20, SplitRole::kTest, 2);
  ModelBundle fresh = ModelBundle::create(small_bundle(true), 3);
  ModelBundle pre, s1, s2, s3;
  Chain() {
    pre = fresh;
    run_stage(pre, train, quick(Stage::kPretrain), 10);
    s1 = pre;
    run_stage(s1, train, quick(Stage::kStage1), 11);
    s2 = s1;
    run_stage(s2, train, quick(Stage::kStage2), 12);
    s3 = s2;
    run_stage(s3, train, quick(Stage::kStage3), 13);
  }
};

const Chain& chain() {
  static const Chain c;
  return c;
}

}  // namespace

TEST_CASE("stages only touch their own components") {
  const auto& c = chain();
  CHECK(c.pre.hash(Component::kClassifier) == c.fresh.hash(Component::kClassifier));
  CHECK(c.pre.hash(Component::kPatchPolicy) == c.fresh.hash(Component::kPatchPolicy));
  CHECK(c.pre.hash(Component::kGlance) != c.fresh.hash(Component::kGlance));

  CHECK(c.s1.hash(Component::kGlance) == c.pre.hash(Component::kGlance));
  CHECK(c.s1.hash(Component::kFocus) != c.pre.hash(Component::kFocus));

  for (auto comp : {Component::kGlance, Component::kFocus, Component::kClassifier}) {
    CHECK(c.s2.hash(comp) == c.s1.hash(comp));
  }
  CHECK(c.s2.hash(Component::kPatchPolicy) != c.s1.hash(Component::kPatchPolicy));
  CHECK(c.s2.hash(Component::kSkipPolicy) != c.s1.hash(Component::kSkipPolicy));

  for (auto comp : {Component::kGlance, Component::kFocus, Component::kPatchPolicy, Component::kSkipPolicy}) {
    CHECK(c.s3.hash(comp) == c.s2.hash(comp));
  }
  CHECK(c.s3.hash(Component::kClassifier) != c.s2.hash(Component::kClassifier));
  CHECK(c.s3.lineage == std::vector<std::string>{"pretrain", "stage1", "stage2", "stage3"});
}

TEST_CASE("stage3 can also fine-tune the focus network") {
  const auto& c = chain();
  auto b = c.s2;
  auto cfg = quick(Stage::kStage3);
  cfg.train_focus = true;
  run_stage(b, c.train, cfg, 13);
  CHECK(b.hash(Component::kFocus) != c.s2.hash(Component::kFocus));
  CHECK(b.hash(Component::kPatchPolicy) == c.s2.hash(Component::kPatchPolicy));
}

TEST_CASE("stages refuse to run out of order") {
  const auto& c = chain();
  auto b = c.pre;
  CHECK_THROWS_AS(run_stage(b, c.train, quick(Stage::kStage2), 1), ConfigError);
  b = c.s1;
  CHECK_THROWS_AS(run_stage(b, c.train, quick(Stage::kStage3), 1), ConfigError);
  CHECK(b.hash(Component::kPatchPolicy) == c.s1.hash(Component::kPatchPolicy));
}

TEST_CASE("stage1 starts near the uniform-prediction loss") {
  auto b = ModelBundle::create(small_bundle(false), 5);
  auto cfg = quick(Stage::kStage1);
  cfg.learning_rate = 1e-7;
  const auto report = run_stage(b, chain().train, cfg, 1);
  CHECK(report.epochs.front().loss == doctest::Approx(std::log(10.0)).epsilon(0.03));
}

TEST_CASE("pretraining may be skipped") {
  const auto& c = chain();
  auto b = c.fresh;
  run_stage(b, c.train, quick(Stage::kStage1), 11);
  run_stage(b, c.train, quick(Stage::kStage2), 12);
  CHECK(b.stage == "stage2");
}

TEST_CASE("online and offline agree on the final prediction") {
  const auto& c = chain();
  const auto plain = online_offline_check(c.s3, c.test, 20);
  INFO(format_check(plain));
  CHECK(plain.passed);

  auto cal = c.s3;
  calibrate(cal, c.train, 0.5);
  const auto skip = online_offline_check(cal, c.test, 20, true);
  INFO(format_check(skip));
  CHECK(skip.passed);
}

TEST_CASE("a one-frame video yields exactly one prediction") {
  const auto& c = chain();
  const auto one = generate_split(small_data(1), 10, SplitRole::kTest, 4);
  const auto r = infer_online(c.s3, one.samples[0]);
  CHECK(r.probs.cols() == 1);
  CHECK(r.patches.size() == 1);
}

TEST_CASE("skip gate limits") {
  const auto& c = chain();
  const auto& s = c.test.samples[0];

  SUBCASE("rho 0 keeps everything and matches plain inference") {
    InferenceOptions keep_all;
    keep_all.use_skip = true;
    keep_all.rho = 0.0;
    const auto a = infer_online(c.s3, s);
    const auto b = infer_online(c.s3, s, keep_all);
    CHECK(a.probs == b.probs);
    CHECK(b.kept == std::vector<bool>(s.frames, true));
  }
  SUBCASE("rho of one skips everything and matches the glance-only path") {
    InferenceOptions none;
    none.use_skip = true;
    none.rho = 1.0;
    const auto r = infer_online(c.s3, s, none);
    CHECK(r.kept == std::vector<bool>(s.frames, false));
    CHECK(r.ledger.focus == 0);

    const auto g = compute_glance(c.s3, s);
    auto st = c.s3.classifier.initial_state();
    nn::Matrix<float> last;
    for (int t = 0; t < s.frames; ++t) {
      last = c.s3.classifier.step(classifier_input(c.s3, g.pooled.col(t), nullptr), st);
    }
    CHECK((r.probs.col(s.frames - 1) - last).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("uncalibrated threshold is a config error") {
    InferenceOptions opt;
    opt.use_skip = true;
    CHECK_THROWS_AS(infer_online(c.s3, s, opt), ConfigError);
  }
}

TEST_CASE("ledgers do not depend on the focus schedule") {
  const auto& c = chain();
  auto cal = c.s3;
  calibrate(cal, c.train, 0.5);
  InferenceOptions par, seq;
  par.use_skip = seq.use_skip = true;
  seq.parallel_focus = false;
  for (int i = 0; i < 5; ++i) {
    const auto& s = c.test.samples[i];
    const auto a = infer_offline(cal, s, par);
    const auto b = infer_offline(cal, s, seq);
    CHECK(a.ledger == b.ledger);
    CHECK((a.probs - b.probs).cwiseAbs().maxCoeff() < 1e-6f);
    CHECK(a.ledger == episode_cost(a.kept, cal.costs()));
  }
}

TEST_CASE("calibration hits the requested keep fraction") {
  auto b = chain().s3;
  const std::vector<double> etas{0.9, 0.7, 0.5};
  for (const auto& r : calibration_checks(b, chain().train, etas)) {
    INFO(format_check(r));
    CHECK(r.passed);
  }
}

TEST_CASE("checkpoints reload bit-exactly and resume identically") {
  const auto& c = chain();
  TempDir dir("pipeline_ckpt");
  const auto path = dir.path / "stage1.afck";
  save_bundle(c.s1, path);
  auto loaded = load_bundle(path);
  for (auto comp : {Component::kGlance, Component::kFocus, Component::kClassifier, Component::kPatchPolicy,
                    Component::kSkipPolicy}) {
    CHECK(loaded.hash(comp) == c.s1.hash(comp));
  }
  CHECK(loaded.lineage == c.s1.lineage);
  CHECK(loaded.config == c.s1.config);

  run_stage(loaded, c.train, quick(Stage::kStage2), 12);
  CHECK(loaded.hash(Component::kPatchPolicy) == c.s2.hash(Component::kPatchPolicy));
  CHECK(loaded.hash(Component::kSkipPolicy) == c.s2.hash(Component::kSkipPolicy));
}
