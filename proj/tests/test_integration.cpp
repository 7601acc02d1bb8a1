#include <doctest.h>

#include "adafocus/evalbench.hpp"
#include "adafocus/pipeline.hpp"
#include "adafocus/synthdata.hpp"

using namespace adafocus;

// Default data, pretrain and warm-up; a short policy stage with a large patch cost.
namespace {

struct Trained {
  DatasetSplit train = generate_split(SynthConfig{}, 2000, SplitRole::kTrain, 101);
  DatasetSplit test = generate_split(SynthConfig{}, 200, SplitRole::kTest, 102);
  ModelBundle bundle;
  StageReport pre, s1, s2;
  double random_acc_before = 0.0, random_acc_after = 0.0;

  Trained() {
    BundleConfig bc;
    bc.adafocus_plus = true;
    bundle = ModelBundle::create(bc, 1);

    pre = run_stage(bundle, train, StageConfig::defaults(Stage::kPretrain), 2);

    EvalOptions random;
    random.policy = PolicyVariant::kRandom;
    random_acc_before = evaluate(bundle, test, random).top1;
    s1 = run_stage(bundle, train, StageConfig::defaults(Stage::kStage1), 3);
    random_acc_after = evaluate(bundle, test, random).top1;

    auto c2 = StageConfig::defaults(Stage::kStage2);
    c2.epochs = 4;
    c2.skip_lambda = 1e-2;
    s2 = run_stage(bundle, train, c2, 4);
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST_CASE("pretrained glance probe is well above chance") {
  const auto& t = trained();
  REQUIRE(t.pre.glance_probe.has_value());
  const double acc = glance_probe_accuracy(t.bundle, *t.pre.glance_probe, t.test);
  MESSAGE("glance probe accuracy " << acc);
  CHECK(acc >= 0.2);
}

TEST_CASE("warm-up improves random-patch accuracy") {
  const auto& t = trained();
  MESSAGE("random-patch accuracy " << t.random_acc_before << " -> " << t.random_acc_after);
  CHECK(t.random_acc_after > t.random_acc_before);
}

TEST_CASE("a large patch cost drives the keep rate down") {
  const auto& t = trained();
  const double keep = t.s2.epochs.back().keep_rate;
  MESSAGE("final keep rate " << keep);
  CHECK(keep < 0.2);
}

TEST_CASE("patch-policy return rises during policy learning") {
  const auto& e = trained().s2.epochs;
  MESSAGE("mean return " << e.front().mean_return << " -> " << e.back().mean_return);
  CHECK(e.back().mean_return > e.front().mean_return);
}

TEST_CASE("evaluation is deterministic and the ablation covers every variant") {
  const auto& t = trained();
  EvalOptions o;
  o.seed = 5;
  const auto a = evaluate(t.bundle, t.test, o);
  const auto b = evaluate(t.bundle, t.test, o);
  CHECK(metrics_to_json(std::span(&a, 1)) == metrics_to_json(std::span(&b, 1)));
  CHECK(a.per_frame_accuracy.size() == 8);

  const auto recs = ablate_policies(t.bundle, t.bundle, t.test, 5);
  std::vector<std::string> names;
  for (const auto& r : recs) names.push_back(r.policy);
  CHECK(names == std::vector<std::string>{"learned", "random", "central", "gaussian"});
  CHECK(recs[1].mean_patch_policy == 0.0);
}
