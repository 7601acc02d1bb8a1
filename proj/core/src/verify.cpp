#include "adafocus/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace adafocus {

std::string format_check(const CheckResult& r) {
  std::ostringstream os;
  os.precision(4);
  os << (r.passed ? "PASS " : "FAIL ") << r.name << " value=" << r.value << " tol=" << r.tolerance;
  if (!r.detail.empty()) os << ' ' << r.detail;
  return os.str();
}

namespace {

using nn::Matrix;

template <typename S>
void fill_normal(Matrix<S>& m, Rng& rng, double scale = 1.0) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(scale * rng.normal());
}

/// Compares the analytic directional derivative sum_i <grad_i, d_i> with
/// (L(x + h d) - L(x - h d)) / 2h for random directions d over `tensors`.
/// `pattern`, when set, fingerprints the ReLU on/off pattern; directions
/// whose +-h probes change it straddle a kink and are redrawn.
CheckResult directional_check(const std::string& name, std::vector<Matrix<double>*> tensors,
                              std::vector<const Matrix<double>*> grads,
                              const std::function<double()>& loss, const GradCheckOptions& opt,
                              Rng& rng, const std::function<std::uint64_t()>& pattern = {}) {
  constexpr int kMaxRedraws = 100;
  double worst = 0.0;
  int failures = 0;
  int redraws = 0;
  const std::uint64_t base_pattern = pattern ? pattern() : 0;
  for (int k = 0; k < opt.projections; ++k) {
    std::vector<Matrix<double>> dirs;
    double analytic = 0.0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Matrix<double> d(tensors[i]->rows(), tensors[i]->cols());
      fill_normal(d, rng);
      analytic += (d.array() * grads[i]->array()).sum();
      dirs.push_back(std::move(d));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] += opt.step * dirs[i];
    const double plus = loss();
    const bool kink_plus = pattern && pattern() != base_pattern;
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] -= 2.0 * opt.step * dirs[i];
    const double minus = loss();
    const bool kink_minus = pattern && pattern() != base_pattern;
    for (std::size_t i = 0; i < tensors.size(); ++i) *tensors[i] += opt.step * dirs[i];
    if ((kink_plus || kink_minus) && redraws < kMaxRedraws) {
      ++redraws;
      --k;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * opt.step);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / scale;
    worst = std::max(worst, rel);
    if (rel > opt.tolerance) ++failures;
  }
  CheckResult r;
  r.name = "gradient:" + name;
  r.value = worst;
  r.tolerance = opt.tolerance;
  r.passed = failures == 0;
  r.detail = std::to_string(opt.projections) + " projections";
  if (redraws > 0) r.detail += ", " + std::to_string(redraws) + " redrawn at ReLU kinks";
  return r;
}

void add_params(nn::ParamList<double>& params, nn::ParamList<double>& grads,
                std::vector<Matrix<double>*>& tensors, std::vector<const Matrix<double>*>& gs) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back(params[i].value);
    gs.push_back(grads[i].value);
  }
}

CheckResult check_backbone(const std::string& name, const nn::ConvBackboneSpec& spec, int side,
                           const GradCheckOptions& opt, Rng& rng) {
  nn::ConvBackbone<double> net(spec, nn::FeatureSource::kGlance, side);
  net.init(rng);
  const int count = 2;
  Matrix<double> x(spec.input_channels, count * side * side);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  nn::ConvBackbone<double>::Cache cache;
  const auto fm = net.forward(x, count, side, side, &cache);
  Matrix<double> w(fm.data.rows(), fm.data.cols());
  fill_normal(w, rng);
  nn::ConvBackbone<double> grad = net;
  nn::ParamList<double> p, g;
  net.collect(p, name);
  grad.collect(g, name);
  nn::zero_params(g);
  const Matrix<double> dx = net.backward(cache, w, grad, true);
  std::vector<Matrix<double>*> tensors;
  std::vector<const Matrix<double>*> gs;
  add_params(p, g, tensors, gs);
  tensors.push_back(&x);
  gs.push_back(&dx);
  auto loss = [&] { return (net.forward(x, count, side, side, nullptr).data.array() * w.array()).sum(); };
  auto pattern = [&] {
    nn::ConvBackbone<double>::Cache c;
    net.forward(x, count, side, side, &c);
    std::uint64_t h = fnv1a(std::string_view{});
    for (const auto& layer : c.layers) {
      std::vector<std::uint8_t> on(static_cast<std::size_t>(layer.out.size()));
      for (Eigen::Index i = 0; i < layer.out.size(); ++i) on[i] = layer.out.data()[i] > 0.0;
      h = fnv1a_values(std::span<const std::uint8_t>(on), h);
    }
    return h;
  };
  return directional_check(name, tensors, gs, loss, opt, rng, pattern);
}

CheckResult check_classifier(nn::ClassifierKind kind, const GradCheckOptions& opt, Rng& rng) {
  const int in = 12, hidden = 8, classes = 5, T = 4, label = 2;
  nn::Classifier<double> cls(kind, in, hidden, classes);
  cls.init(rng);
  // Larger head weights keep the loss away from its flat uniform region.
  fill_normal(cls.head.weight, rng, 0.5);
  Matrix<double> x(in, T);
  fill_normal(x, rng);
  nn::Classifier<double>::SequenceCache cache;
  const auto probs = cls.forward_sequence(x, &cache);
  const auto [l0, dprobs] = nn::sequence_cross_entropy(probs, label);
  (void)l0;
  nn::Classifier<double> grad = cls;
  nn::ParamList<double> p, g;
  cls.collect(p, "classifier");
  grad.collect(g, "classifier");
  nn::zero_params(g);
  const Matrix<double> dx = cls.backward_sequence(cache, dprobs, grad, true);
  std::vector<Matrix<double>*> tensors;
  std::vector<const Matrix<double>*> gs;
  add_params(p, g, tensors, gs);
  tensors.push_back(&x);
  gs.push_back(&dx);
  auto loss = [&] { return nn::sequence_cross_entropy(cls.forward_sequence(x, nullptr), label).first; };
  return directional_check(std::string("classifier_") + std::string(nn::to_string(kind)), tensors, gs,
                           loss, opt, rng);
}

CheckResult check_linear(const GradCheckOptions& opt, Rng& rng) {
  nn::Linear<double> lin(7, 4);
  lin.init(rng);
  Matrix<double> x(7, 3), w(4, 3);
  fill_normal(x, rng);
  fill_normal(w, rng);
  nn::Linear<double> grad = lin;
  nn::ParamList<double> p, g;
  lin.collect(p, "linear");
  grad.collect(g, "linear");
  nn::zero_params(g);
  const Matrix<double> dx = lin.backward(x, w, grad, true);
  std::vector<Matrix<double>*> tensors;
  std::vector<const Matrix<double>*> gs;
  add_params(p, g, tensors, gs);
  tensors.push_back(&x);
  gs.push_back(&dx);
  auto loss = [&] { return (lin.forward(x).array() * w.array()).sum(); };
  return directional_check("linear", tensors, gs, loss, opt, rng);
}

CheckResult check_policy(PolicyKind kind, const GradCheckOptions& opt, Rng& rng) {
  PolicyShape shape;
  shape.feature_channels = 4;
  shape.feature_extent = 3;
  shape.compressed_channels = 3;
  shape.hidden_size = 6;
  shape.num_actions = kind == PolicyKind::kPatch ? 9 : 1;
  PolicyNet<double> net(kind, shape);
  net.init(rng);
  fill_normal(net.head.weight, rng, 0.5);
  std::vector<PpoEpisode> episodes(3);
  std::vector<double> advantages;
  for (auto& ep : episodes) {
    for (int t = 0; t < 3; ++t) {
      Matrix<float> f(shape.feature_channels, shape.feature_extent * shape.feature_extent);
      for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.uniform());
      ep.inputs.push_back(std::move(f));
      const int a = kind == PolicyKind::kPatch
                        ? static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.num_actions)))
                        : static_cast<int>(rng.below(2));
      ep.actions.push_back(a);
      // Old log-probs near the current ones so most ratios sit inside the
      // clip range and some fall outside it.
      const double base = kind == PolicyKind::kPatch ? std::log(1.0 / shape.num_actions) : std::log(0.5);
      ep.old_log_probs.push_back(base + rng.uniform(-0.4, 0.4));
      ep.returns.push_back(rng.normal());
      ep.values.push_back(0.0);
      advantages.push_back(rng.normal());
    }
  }
  PpoConfig cfg;
  PolicyNet<double> grad = net;
  nn::ParamList<double> p, g;
  net.collect(p, "policy");
  grad.collect(g, "policy");
  nn::zero_params(g);
  ppo_loss<double>(net, episodes, advantages, cfg, &grad);
  std::vector<Matrix<double>*> tensors;
  std::vector<const Matrix<double>*> gs;
  add_params(p, g, tensors, gs);
  auto loss = [&] { return ppo_loss<double>(net, episodes, advantages, cfg, nullptr).total; };
  return directional_check(kind == PolicyKind::kPatch ? "patch_policy_ppo" : "skip_policy_ppo", tensors,
                           gs, loss, opt, rng);
}

}  // namespace

std::vector<CheckResult> gradient_checks(const GradCheckOptions& options) {
  Rng rng(options.seed);
  std::vector<CheckResult> out;
  out.push_back(check_backbone("glance", nn::ConvBackboneSpec::default_glance(1), 32, options, rng));
  out.push_back(check_backbone("focus", nn::ConvBackboneSpec::default_focus(1), 16, options, rng));
  out.push_back(check_classifier(nn::ClassifierKind::kRecurrent, options, rng));
  out.push_back(check_classifier(nn::ClassifierKind::kAveraging, options, rng));
  out.push_back(check_linear(options, rng));
  out.push_back(check_policy(PolicyKind::kPatch, options, rng));
  out.push_back(check_policy(PolicyKind::kSkip, options, rng));
  return out;
}

CheckResult reward_zero_mean_check(const ModelBundle& bundle, const DatasetSplit& split, int triples,
                                   std::uint64_t seed) {
  if (split.samples.empty()) throw ContractError("reward check: empty split");
  Rng rng(seed);
  const int K = bundle.grid.size();
  double worst = 0.0;
  for (int k = 0; k < triples; ++k) {
    const auto& s = split.samples[rng.below(split.samples.size())];
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.frames)));
    const auto glance = compute_glance(bundle, s);
    // Random realized prefix for frames 0..t-1.
    auto state = bundle.classifier.initial_state();
    std::vector<PatchRequest> prefix;
    for (int u = 0; u < t; ++u) {
      prefix.push_back({u, bundle.grid.offsets[rng.below(static_cast<std::uint64_t>(K))]});
    }
    if (!prefix.empty()) {
      const auto local = focus_pooled(bundle, s, prefix);
      for (int u = 0; u < t; ++u) {
        const Matrix<float> g = glance.pooled.col(u);
        const Matrix<float> l = local.col(u);
        bundle.classifier.step(classifier_input(bundle, g, &l), state);
      }
    }
    std::vector<PatchRequest> all;
    for (int c = 0; c < K; ++c) all.push_back({t, bundle.grid.offsets[c]});
    const auto local = focus_pooled(bundle, s, all);
    std::vector<double> conf;
    const Matrix<float> g = glance.pooled.col(t);
    for (int c = 0; c < K; ++c) {
      auto branch = state;
      const Matrix<float> l = local.col(c);
      conf.push_back(bundle.classifier.step(classifier_input(bundle, g, &l), branch)(s.label, 0));
    }
    double baseline = 0.0;
    for (double p : conf) baseline += p;
    baseline /= K;
    double mean_reward = 0.0;
    for (double p : conf) mean_reward += patch_reward(p, baseline);
    mean_reward /= K;
    worst = std::max(worst, std::abs(mean_reward));
  }
  CheckResult r;
  r.name = "reward_zero_mean";
  r.value = worst;
  r.tolerance = 1e-6;
  r.passed = worst <= r.tolerance;
  r.detail = std::to_string(triples) + " triples, K=" + std::to_string(K);
  return r;
}

CheckResult online_offline_check(const ModelBundle& bundle, const DatasetSplit& split, int n,
                                 bool use_skip) {
  const int count = std::min<int>(n, static_cast<int>(split.samples.size()));
  InferenceOptions io;
  io.use_skip = use_skip;
  double worst = 0.0;
  for (int i = 0; i < count; ++i) {
    const auto on = infer_online(bundle, split.samples[i], io);
    const auto off = infer_offline(bundle, split.samples[i], io);
    const Matrix<float> last = on.probs.col(on.probs.cols() - 1);
    worst = std::max(worst, static_cast<double>((last - off.probs).cwiseAbs().maxCoeff()));
  }
  CheckResult r;
  r.name = use_skip ? "online_offline_skip" : "online_offline";
  r.value = worst;
  r.tolerance = 1e-6;
  r.passed = worst <= r.tolerance;
  r.detail = std::to_string(count) + " samples";
  return r;
}

std::vector<CheckResult> calibration_checks(ModelBundle& bundle, const DatasetSplit& split,
                                            std::span<const double> etas) {
  std::vector<CheckResult> out;
  for (double eta : etas) {
    const auto cal = calibrate(bundle, split, eta);
    const auto scores = skip_scores(bundle, split);
    const double n = static_cast<double>(scores.size());
    const double kept =
        static_cast<double>(std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= cal.rho; })) / n;
    CheckResult r;
    std::ostringstream name;
    name << "calibration_eta_" << eta;
    r.name = name.str();
    r.value = kept;
    r.tolerance = eta + 1.0 / n;
    r.passed = kept >= eta && kept <= eta + 1.0 / n + 1e-12;
    std::ostringstream d;
    d << "rho=" << cal.rho << " N=" << scores.size() << (cal.degenerate ? " degenerate" : "");
    r.detail = d.str();
    out.push_back(r);
  }
  return out;
}

CheckResult bandit_check(std::uint64_t seed, int updates) {
  PolicyShape shape;
  shape.feature_channels = 1;
  shape.feature_extent = 1;
  shape.compressed_channels = 1;
  shape.hidden_size = 4;
  shape.num_actions = 2;
  PolicyNet<float> policy(PolicyKind::kPatch, shape);
  Rng rng(seed);
  policy.init(rng);
  PpoConfig cfg;
  cfg.learning_rate = 1e-2;
  nn::AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  nn::AdamOptimizer<float> opt(adam);
  const Matrix<float> input = Matrix<float>::Ones(1, 1);
  auto best_prob = [&] {
    return policy_step(policy, input, policy.initial_state()).dist[0];
  };
  for (int u = 0; u < updates; ++u) {
    std::vector<PpoEpisode> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto step = policy_step(policy, input, policy.initial_state());
      const auto action = select_patch(step.dist, SelectMode::kSample, rng);
      PpoEpisode ep;
      ep.inputs.push_back(input);
      ep.actions.push_back(action.index);
      ep.old_log_probs.push_back(action.log_prob);
      ep.returns.push_back(action.index == 0 ? 1.0 : -1.0);
      ep.values.push_back(step.value);
      batch.push_back(std::move(ep));
    }
    ppo_update(policy, opt, batch, cfg);
  }
  CheckResult r;
  r.name = "ppo_bandit";
  r.value = best_prob();
  r.tolerance = 0.95;
  r.passed = r.value >= r.tolerance;
  r.detail = std::to_string(updates) + " updates";
  return r;
}

}  // namespace adafocus
