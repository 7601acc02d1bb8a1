#include <doctest.h>

#include <cmath>
#include <vector>

#include "adafocus/focuspolicy.hpp"

using namespace adafocus;
using nn::Matrix;

namespace {

PolicyNet<float> make_policy(PolicyKind kind, int actions, std::uint64_t seed) {
  PolicyShape shape;
  shape.feature_channels = 16;
  shape.feature_extent = 8;
  shape.num_actions = actions;
  PolicyNet<float> net(kind, shape);
  Rng rng(seed);
  net.init(rng);
  return net;
}

Matrix<float> random_features(std::uint64_t seed) {
  Rng rng(seed);
  Matrix<float> m(16, 64);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return m;
}

}  // namespace

TEST_CASE("grid offsets are evenly spaced") {
  const auto g = build_grid(32, 16, 3);
  REQUIRE(g.size() == 9);
  std::vector<int> ys;
  for (int i = 0; i < 3; ++i) ys.push_back(g.offsets[i * 3].y);
  CHECK(ys == std::vector<int>{0, 8, 16});
  CHECK(g.offsets[1].x == 8);
  CHECK_FALSE(g.degenerate);
  CHECK(build_grid(64, 16, 7).size() == 49);
}

TEST_CASE("patch equal to the frame gives a degenerate grid") {
  const auto g = build_grid(32, 32, 4);
  CHECK(g.degenerate);
  for (const auto& o : g.offsets) CHECK(o == PatchOffset{0, 0});
  CHECK_THROWS_AS(build_grid(32, 33, 3), ConfigError);
}

TEST_CASE("nearest and central candidates") {
  const auto g = build_grid(64, 16, 5);
  CHECK(g.offsets[g.central()] == PatchOffset{24, 24});
  CHECK(g.nearest(8, 8) == 0);
  CHECK(g.nearest(56, 56) == g.size() - 1);
}

TEST_CASE("crop corner cases") {
  const int C = 2, H = 6, P = 3;
  std::vector<float> frame(C * H * H);
  for (std::size_t i = 0; i < frame.size(); ++i) frame[i] = static_cast<float>(i);

  CHECK(crop(frame, C, H, H, {0, 0}, H) == frame);

  const auto br = crop(frame, C, H, H, {H - P, H - P}, P);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < P; ++y) {
      for (int x = 0; x < P; ++x) {
        CHECK(br[(c * P + y) * P + x] == frame[(c * H + H - P + y) * H + H - P + x]);
      }
    }
  }
  CHECK_THROWS_AS(crop(frame, C, H, H, {H - P + 1, 0}, P), ContractError);
  CHECK_THROWS_AS(crop(frame, C, H, H, {0, -1}, P), ContractError);
}

TEST_CASE("patch policy outputs") {
  auto net = make_policy(PolicyKind::kPatch, 25, 1);
  const auto f = random_features(2);

  SUBCASE("zero head is uniform") {
    net.head.weight.setZero();
    net.head.bias.setZero();
    const auto r = policy_step(net, f, net.initial_state());
    for (double p : r.dist) CHECK(p == doctest::Approx(1.0 / 25));
  }
  SUBCASE("distribution sums to one and calls are pure") {
    const auto a = policy_step(net, f, net.initial_state());
    const auto b = policy_step(net, f, net.initial_state());
    double s = 0.0;
    for (double p : a.dist) s += p;
    CHECK(std::abs(s - 1.0) < 1e-6);
    CHECK(a.dist == b.dist);
    CHECK(a.value == b.value);
    CHECK(std::isfinite(a.value));
  }
  SUBCASE("state advances") {
    const auto a = policy_step(net, f, net.initial_state());
    const auto b = policy_step(net, f, a.state);
    CHECK(a.dist != b.dist);
  }
  SUBCASE("wrong feature shape") {
    CHECK_THROWS_AS(policy_step(net, Matrix<float>::Zero(16, 49), net.initial_state()), ContractError);
  }
}

TEST_CASE("select_patch") {
  Rng rng(11);
  std::vector<double> onehot(9, 0.0);
  onehot[5] = 1.0;
  CHECK(select_patch(onehot, SelectMode::kArgmax, rng).index == 5);
  CHECK(select_patch(onehot, SelectMode::kSample, rng).index == 5);

  const std::vector<double> uniform(4, 0.25);
  CHECK(select_patch(uniform, SelectMode::kArgmax, rng).index == 0);

  std::vector<int> counts(4, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[select_patch(uniform, SelectMode::kSample, rng).index];
  for (int c : counts) CHECK(std::abs(c / double(n) - 0.25) <= 0.02);

  const auto a = select_patch(uniform, SelectMode::kSample, rng);
  CHECK(a.log_prob == doctest::Approx(std::log(0.25)));
}

TEST_CASE("skip gate") {
  auto net = make_policy(PolicyKind::kSkip, 1, 3);
  const auto f = random_features(4);

  SUBCASE("zero head keeps with probability one half") {
    net.head.weight.setZero();
    net.head.bias.setZero();
    CHECK(skip_step(net, f, net.initial_state()).p_keep == doctest::Approx(0.5));
  }
  SUBCASE("keep probability stays strictly inside (0, 1)") {
    for (int i = 0; i < 20; ++i) {
      const auto r = skip_step(net, random_features(100 + i) * 50.0f, net.initial_state());
      CHECK(r.p_keep > 0.0);
      CHECK(r.p_keep < 1.0);
    }
  }
  SUBCASE("state advances regardless of the decision") {
    const auto a = skip_step(net, f, net.initial_state());
    CHECK(a.state != net.initial_state());
  }
}

TEST_CASE("decide_skip") {
  Rng rng(12);
  CHECK(decide_skip(0.9, SkipMode::kThreshold, 0.5, rng).keep);
  CHECK(decide_skip(0.5, SkipMode::kThreshold, 0.5, rng).keep);
  CHECK_FALSE(decide_skip(0.3, SkipMode::kThreshold, 0.5, rng).keep);

  int kept = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) kept += decide_skip(0.7, SkipMode::kSample, 0.5, rng).keep ? 1 : 0;
  CHECK(std::abs(kept / double(n) - 0.7) <= 0.02);
}
