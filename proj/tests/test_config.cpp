#include <doctest.h>

#include "adafocus/config.hpp"

using namespace adafocus;

TEST_CASE("defaults validate and render round-trips") {
  const RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  const auto text = render_config(cfg);
  CHECK(render_config(parse_config(text)) == text);
  CHECK(cfg.plan.bundle.frame_size == cfg.data.frame_size);
}

TEST_CASE("parsed values reach the right fields") {
  const auto cfg = parse_config(
      "[run]\nseed = 7\n"
      "[data]\nframe_size = 48\nnum_classes = 6\ntrain_size = 60\n"
      "[model]\npatch_size = 24\nadafocus_plus = true\nfocus_layers = 8x3/1,16x3/2\n"
      "[stage2]\nlambda = 0.01\nepochs = 3\n"
      "[eval]\netas = 1, 0.6\nuse_skip = true\n");
  CHECK(cfg.seed == 7);
  CHECK(cfg.data.frame_size == 48);
  CHECK(cfg.plan.bundle.frame_size == 48);
  CHECK(cfg.plan.bundle.num_classes == 6);
  CHECK(cfg.sizes.train == 60);
  CHECK(cfg.plan.bundle.patch_size == 24);
  CHECK(cfg.plan.bundle.adafocus_plus);
  CHECK(cfg.plan.bundle.focus_spec.layers.size() == 2);
  CHECK(cfg.plan.stage2.skip_lambda == 0.01);
  CHECK(cfg.plan.stage2.epochs == 3);
  CHECK(cfg.eval.etas == std::vector<double>{1.0, 0.6});
  CHECK(cfg.eval.use_skip);
}

TEST_CASE("bad input is a config error") {
  CHECK_THROWS_AS(parse_config("[data]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[nosuch]\nseed = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[data]\nframe_size = big\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nadafocus_plus = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[eval]\nuse_skip = true\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_config("[data]\nglyph_size = 100\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_backbone("16x3", 1), ConfigError);
}

TEST_CASE("overrides") {
  RunConfig cfg;
  apply_override(cfg, "stage1.epochs=2");
  apply_override(cfg, "data.frames = 6");
  CHECK(cfg.plan.stage1.epochs == 2);
  CHECK(cfg.data.frames == 6);
  CHECK_THROWS_AS(apply_override(cfg, "epochs=2"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "stage1.nothing=2"), ConfigError);
}

TEST_CASE("hash ignores the seed and output location but not the model") {
  RunConfig a, b;
  b.seed = 99;
  b.runs_dir = "/elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(run_dir_name(a) != run_dir_name(b));
  CHECK(run_dir_name(b).size() == 12 + 4);
  apply_override(b, "model.patch_size=24");
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("backbone strings round-trip") {
  const auto spec = parse_backbone("16x3/1,32x3/2", 1);
  REQUIRE(spec.layers.size() == 2);
  CHECK(spec.layers[1].out_channels == 32);
  CHECK(spec.layers[1].stride == 2);
  CHECK(format_backbone(spec) == "16x3/1,32x3/2");
}

TEST_CASE("every known key appears in the rendered config") {
  const auto text = render_config(RunConfig{});
  for (const auto& k : config_keys()) {
    const auto key = k.substr(k.find('.') + 1);
    INFO(k);
    CHECK(text.find("\n" + key + " = ") != std::string::npos);
  }
}
