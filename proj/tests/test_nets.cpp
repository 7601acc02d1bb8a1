#include <doctest.h>

#include <cmath>
#include <vector>

#include "adafocus/bundle.hpp"
#include "adafocus/nets.hpp"
#include "adafocus/optim.hpp"
#include "adafocus/verify.hpp"

using namespace adafocus;
using nn::Matrix;

namespace {

Matrix<float> random_frame(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<float> m(c, h * w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.uniform());
  return m;
}

}  // namespace

TEST_CASE("zero frame through a zero-bias backbone gives an all-zero map") {
  nn::ConvBackbone<float> net(nn::ConvBackboneSpec::default_glance(1));
  Rng rng(1);
  net.init(rng);
  nn::ParamList<float> params;
  net.collect(params, "g");
  for (auto& p : params) {
    if (p.name.find("bias") != std::string::npos) p.value->setZero();
  }
  const auto fm = net.forward(Matrix<float>::Zero(1, 64 * 64), 1, 64, 64, nullptr);
  CHECK(fm.data.cwiseAbs().maxCoeff() == 0.0f);
  CHECK(fm.height == 8);
}

TEST_CASE("backbone forward is pure") {
  nn::ConvBackbone<float> net(nn::ConvBackboneSpec::default_glance(1));
  Rng rng(2);
  net.init(rng);
  const auto x = random_frame(1, 64, 64, 3);
  CHECK(net.forward(x, 1, 64, 64, nullptr).data == net.forward(x, 1, 64, 64, nullptr).data);
}

TEST_CASE("cropping at the origin then focusing equals focusing the same pixels") {
  const int H = 32, P = 16;
  nn::ConvBackbone<float> net(nn::ConvBackboneSpec::default_focus(1), nn::FeatureSource::kFocus, P);
  Rng rng(4);
  net.init(rng);
  const auto frame = random_frame(1, H, H, 5);
  const auto patch = crop(std::span<const float>(frame.data(), frame.size()), 1, H, H, {0, 0}, P);
  Matrix<float> direct(1, P * P);
  for (int y = 0; y < P; ++y) {
    for (int x = 0; x < P; ++x) direct(0, y * P + x) = frame(0, y * H + x);
  }
  const Matrix<float> cropped = Eigen::Map<const Matrix<float>>(patch.data(), 1, P * P);
  CHECK(net.forward(cropped, 1, P, P, nullptr).data == net.forward(direct, 1, P, P, nullptr).data);
}

TEST_CASE("focus backbone rejects the wrong patch size") {
  nn::ConvBackbone<float> net(nn::ConvBackboneSpec::default_focus(1), nn::FeatureSource::kFocus, 16);
  Rng rng(4);
  net.init(rng);
  CHECK_THROWS_AS(net.forward(Matrix<float>::Zero(1, 20 * 20), 1, 20, 20, nullptr), ContractError);
}

TEST_CASE("focus network is heavier than the glance network") {
  const nn::ConvBackbone<float> g(nn::ConvBackboneSpec::default_glance(1));
  const nn::ConvBackbone<float> l(nn::ConvBackboneSpec::default_focus(1));
  CHECK(l.num_params() > g.num_params());
}

TEST_CASE("global average pooling") {
  nn::FeatureMap<float> fm;
  SUBCASE("constant map") {
    fm.height = fm.width = 3;
    fm.data = Matrix<float>::Constant(2, 9, 0.75f);
    const auto p = nn::pool(fm);
    CHECK(p(0, 0) == doctest::Approx(0.75));
    CHECK(p(1, 0) == doctest::Approx(0.75));
  }
  SUBCASE("1x1 map is the identity") {
    fm.height = fm.width = 1;
    fm.count = 2;
    fm.data = Matrix<float>(3, 2);
    fm.data << 1, 2, 3, 4, 5, 6;
    CHECK(nn::pool(fm) == fm.data);
  }
  SUBCASE("values 0..3") {
    fm.height = fm.width = 2;
    fm.data = Matrix<float>(1, 4);
    fm.data << 0, 1, 2, 3;
    CHECK(nn::pool(fm)(0, 0) == doctest::Approx(1.5));
  }
}

TEST_CASE("recurrent classifier") {
  nn::Classifier<float> clf(nn::ClassifierKind::kRecurrent, 12, 16, 10);
  Rng rng(6);
  clf.init(rng);
  Matrix<float> a = random_frame(1, 1, 12, 7).transpose();
  Matrix<float> b = random_frame(1, 1, 12, 8).transpose();

  SUBCASE("probabilities sum to one") {
    auto st = clf.initial_state();
    for (int i = 0; i < 5; ++i) {
      const auto p = clf.step(random_frame(1, 1, 12, 100 + i).transpose(), st);
      CHECK(std::abs(p.sum() - 1.0f) < 1e-6);
    }
  }
  SUBCASE("replay of the same two steps is identical") {
    auto s1 = clf.initial_state(), s2 = clf.initial_state();
    clf.step(a, s1);
    clf.step(a, s2);
    CHECK(clf.step(b, s1) == clf.step(b, s2));
  }
  SUBCASE("order matters") {
    auto s1 = clf.initial_state(), s2 = clf.initial_state();
    clf.step(a, s1);
    const auto p_ab = clf.step(b, s1);
    clf.step(b, s2);
    const auto p_ba = clf.step(a, s2);
    CHECK((p_ab - p_ba).cwiseAbs().maxCoeff() > 1e-6f);
  }
  SUBCASE("wrong input size") {
    auto st = clf.initial_state();
    CHECK_THROWS_AS(clf.step(Matrix<float>::Zero(11, 1), st), ContractError);
  }
}

TEST_CASE("averaging classifier") {
  nn::Classifier<float> clf(nn::ClassifierKind::kAveraging, 4, 0, 2);
  Rng rng(9);
  clf.init(rng);
  const Matrix<float> a = random_frame(1, 1, 4, 10).transpose();

  SUBCASE("one frame equals that frame's softmax") {
    auto st = clf.initial_state();
    const auto p = clf.step(a, st);
    const auto direct = nn::softmax_columns<float>(clf.head.forward(a));
    CHECK((p - direct).cwiseAbs().maxCoeff() < 1e-7f);
  }
  SUBCASE("identical frames keep the prediction") {
    auto st = clf.initial_state();
    const auto p1 = clf.step(a, st);
    const auto p2 = clf.step(a, st);
    CHECK((p1 - p2).cwiseAbs().maxCoeff() < 1e-7f);
  }
  SUBCASE("mean of per-frame softmax outputs") {
    // Zero weights and chosen biases make the per-frame softmax explicit.
    clf.head.weight.setZero();
    auto st = clf.initial_state();
    clf.head.bias << 0.0f, std::log(0.8f / 0.2f);
    clf.step(a, st);
    clf.head.bias << 0.0f, std::log(0.4f / 0.6f);
    const auto p = clf.step(a, st);
    CHECK(p(0, 0) == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(p(1, 0) == doctest::Approx(0.6).epsilon(1e-6));
  }
}

TEST_CASE("SGD and cosine schedule") {
  Matrix<double> x = Matrix<double>::Constant(1, 1, 1.0);
  Matrix<double> g(1, 1);
  nn::ParamList<double> params{{"x", &x}}, grads{{"x", &g}};

  SUBCASE("one step on x^2") {
    nn::SgdOptimizer<double> opt({0.1, 0.0, 0.0, false, 0});
    g(0, 0) = 2.0 * x(0, 0);
    opt.step(params, grads);
    CHECK(x(0, 0) == doctest::Approx(0.8));
  }
  SUBCASE("zero gradient only applies weight decay") {
    nn::SgdOptimizer<double> opt({0.1, 0.0, 0.01, false, 0});
    g.setZero();
    opt.step(params, grads);
    CHECK(x(0, 0) == doctest::Approx(1.0 - 0.1 * 0.01));
  }
  SUBCASE("non-finite gradient names the step") {
    nn::SgdOptimizer<double> opt;
    g(0, 0) = 0.0;
    opt.step(params, grads);
    g(0, 0) = std::nan("");
    try {
      opt.step(params, grads);
      FAIL("expected a training error");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
  }
  CHECK(nn::cosine_lr(0.05, 100, 100) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(nn::cosine_lr(0.05, 0, 100) == doctest::Approx(0.05));
  CHECK(nn::cosine_lr(0.05, 50, 100) == doctest::Approx(0.025));
}

TEST_CASE("gradient clipping scales to the target norm") {
  Matrix<float> a(1, 2), b(1, 1);
  a << 3.0f, 0.0f;
  b << 4.0f;
  nn::ParamList<float> grads{{"a", &a}, {"b", &b}};
  CHECK(nn::clip_grad_norm(grads, 1.0) == doctest::Approx(5.0));
  CHECK(a(0, 0) == doctest::Approx(0.6));
  CHECK(b(0, 0) == doctest::Approx(0.8));
  CHECK(nn::clip_grad_norm(grads, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("analytic gradients match central differences") {
  GradCheckOptions opts;
  opts.projections = 6;
  for (const auto& r : gradient_checks(opts)) {
    INFO(format_check(r));
    CHECK(r.passed);
  }
}
