#include <doctest.h>

#include "adafocus/bundle.hpp"
#include "adafocus/costmodel.hpp"

using namespace adafocus;

TEST_CASE("layer multiply-add counts") {
  CHECK(conv_flops(8, 8, 1, 1, 3) == 576);
  CHECK(linear_flops(64, 10) == 640);
  CHECK(gru_flops(10, 4) == 3 * 10 * 4 + 3 * 4 * 4);

  nn::ConvBackboneSpec one{1, {{1, 3, 1, nn::Nonlinearity::kRelu}}};
  CHECK(count_flops(one, 8) == 576);
}

TEST_CASE("doubling the input side of a stride-1 net quadruples the count") {
  nn::ConvBackboneSpec spec{1, {{4, 3, 1, nn::Nonlinearity::kRelu}, {8, 3, 1, nn::Nonlinearity::kRelu}}};
  CHECK(count_flops(spec, 32) == 4 * count_flops(spec, 16));
}

TEST_CASE("patch cost ratio") {
  const auto focus = nn::ConvBackboneSpec::default_focus(1);
  CHECK(patch_cost_ratio(64, 64, focus) == 1.0);
  const double r = patch_cost_ratio(96, 224, focus);
  CHECK(r >= 0.16);
  CHECK(r <= 0.21);
  CHECK((96.0 / 224.0) * (96.0 / 224.0) == doctest::Approx(0.1837).epsilon(1e-3));
}

TEST_CASE("episode cost accounting") {
  ComponentCosts c;
  c.glance = 100;
  c.focus = 1000;
  c.patch_policy = 10;
  c.skip_policy = 7;
  c.classifier = 3;

  const std::vector<bool> all(8, true);
  const auto full = episode_cost(all, c);
  CHECK(full.focus == 8 * 1000);
  CHECK(full.glance == 8 * 100);
  CHECK(full.total() == 8 * (100 + 1000 + 10 + 7 + 3));
  CHECK(full.per_frame.size() == 8);

  std::vector<bool> half(8, true);
  for (int i = 0; i < 8; i += 2) half[i] = false;
  const auto h = episode_cost(half, c);
  CHECK(h.focus * 2 == full.focus);
  CHECK(h.glance == full.glance);
  CHECK(h.skip_policy == full.skip_policy);
  CHECK(h.per_frame[0].focus == 0);
  CHECK(h.per_frame[0].skip_policy == 7);

  MultiAdds sum = 0;
  for (const auto& f : h.per_frame) sum += f.total();
  CHECK(sum == h.total());
}

TEST_CASE("bundle component costs follow the specs") {
  BundleConfig cfg;
  cfg.adafocus_plus = true;
  const auto b = ModelBundle::create(cfg, 1);
  const auto c = b.costs();
  CHECK(c.glance == count_flops(cfg.glance_spec, cfg.frame_size));
  CHECK(c.focus == count_flops(cfg.focus_spec, cfg.patch_size));
  CHECK(c.skip_policy > 0);
  CHECK(c.focus > c.glance);

  cfg.adafocus_plus = false;
  CHECK(ModelBundle::create(cfg, 1).costs().skip_policy == 0);
}
