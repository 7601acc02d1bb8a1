#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "adafocus/evalbench.hpp"
#include "adafocus/serialize.hpp"
#include "test_util.hpp"

using namespace adafocus;
using nn::Matrix;

namespace {

MetricsRecord sample_record() {
  MetricsRecord r;
  r.label = "adafocus";
  r.policy = "learned";
  r.mode = "online";
  r.patch_size = 16;
  r.eta = 0.7;
  r.num_samples = 500;
  r.top1 = 0.8125;
  r.mean_flops = 1.25e7;
  r.mean_glance = 4.0e6;
  r.mean_focus = 8.0e6;
  r.mean_patch_policy = 3.0e5;
  r.mean_skip_policy = 1.5e5;
  r.mean_classifier = 5.0e4;
  r.per_frame_accuracy = {0.5, 0.625, 0.75, 0.8125};
  r.keep_rate = 0.7;
  r.seed = 3;
  r.config_hash = "0123456789abcdef";
  return r;
}

}  // namespace

TEST_CASE("scoring an oracle gives perfect accuracy") {
  std::vector<Matrix<float>> probs;
  std::vector<int> labels;
  for (int i = 0; i < 50; ++i) {
    Matrix<float> p = Matrix<float>::Zero(10, 3);
    p.row(i % 10).setOnes();
    probs.push_back(p);
    labels.push_back(i % 10);
  }
  const auto s = score_predictions(probs, labels);
  CHECK(s.top1 == 1.0);
  CHECK(s.per_frame_accuracy == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("scoring random predictions lands near chance") {
  Rng rng(21);
  std::vector<Matrix<float>> probs;
  std::vector<int> labels;
  for (int i = 0; i < 3000; ++i) {
    Matrix<float> p(10, 1);
    for (int k = 0; k < 10; ++k) p(k, 0) = static_cast<float>(rng.uniform());
    probs.push_back(p);
    labels.push_back(static_cast<int>(rng.below(10)));
  }
  CHECK(std::abs(score_predictions(probs, labels).top1 - 0.1) <= 0.03);
}

TEST_CASE("scoring rejects mismatched inputs") {
  std::vector<Matrix<float>> probs(2, Matrix<float>::Zero(10, 1));
  std::vector<int> labels{1};
  CHECK_THROWS_AS(score_predictions(probs, labels), ContractError);
}

TEST_CASE("glyph overlap") {
  CHECK(glyph_overlap({0, 0}, 16, {4, 4}, 8) == 1.0);
  CHECK(glyph_overlap({0, 0}, 16, {12, 4}, 8) == 0.5);
  CHECK(glyph_overlap({0, 0}, 16, {12, 12}, 8) == 0.25);
  CHECK(glyph_overlap({0, 0}, 16, {20, 0}, 8) == 0.0);

  std::vector<SelectionRecord> recs(4);
  recs[0].overlap = 1.0;
  recs[1].overlap = 0.5;
  CHECK(overlap_rate(recs) == 0.375);
}

TEST_CASE("metrics JSON round-trips") {
  std::vector<MetricsRecord> recs{sample_record(), sample_record()};
  recs[1].eta.reset();
  recs[1].keep_rate.reset();
  recs[1].per_frame_accuracy.clear();
  recs[1].policy = "random";
  const auto text = metrics_to_json(recs);
  const auto back = metrics_from_json(text);
  REQUIRE(back.size() == 2);
  CHECK(metrics_to_json(back) == text);
  CHECK(back[0].top1 == recs[0].top1);
  CHECK_FALSE(back[1].eta.has_value());
  CHECK_THROWS_AS(metrics_from_json("{not json"), FormatError);
  CHECK_THROWS_AS(metrics_from_json("[{\"label\": 3}]"), FormatError);
}

TEST_CASE("metrics CSV has one header and one row per record") {
  std::vector<MetricsRecord> recs{sample_record(), sample_record(), sample_record()};
  const auto csv = metrics_to_csv(recs);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.rfind("label,", 0) == 0);
}

TEST_CASE("plots") {
  TempDir dir("plots");
  SUBCASE("empty record set writes nothing") {
    const auto out = dir.path / "plots";
    CHECK_THROWS_AS(emit_plots({}, out.string()), ContractError);
    CHECK_FALSE(std::filesystem::exists(out));
  }
  SUBCASE("tradeoff and online curve files are written") {
    std::vector<MetricsRecord> recs{sample_record()};
    auto r2 = sample_record();
    r2.eta = 0.5;
    r2.top1 = 0.7;
    r2.mean_flops = 9.0e6;
    recs.push_back(r2);
    const auto files = emit_plots(recs, dir.path.string());
    CHECK(files.size() == 4);
    for (const char* f : {"tradeoff.csv", "tradeoff.svg", "online_curve.csv", "online_curve.svg"}) {
      INFO(f);
      CHECK(std::filesystem::exists(dir.path / f));
    }
    CHECK(read_text(dir.path / "tradeoff.svg").find("<svg") != std::string::npos);
  }
}
