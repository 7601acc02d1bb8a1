#include "adafocus/rltrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace adafocus {

void PpoConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("ppo: gamma must lie in (0, 1)");
  if (!(clip_epsilon > 0.0)) throw ConfigError("ppo: clip_epsilon must be > 0");
  if (epochs_per_batch < 1) throw ConfigError("ppo: epochs_per_batch must be >= 1");
  if (batch_size < 1) throw ConfigError("ppo: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("ppo: learning_rate must be > 0");
  if (value_loss_coef < 0.0 || entropy_coef < 0.0) {
    throw ConfigError("ppo: loss coefficients must be >= 0");
  }
}

void SkipRewardConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("skip reward: lambda must be >= 0");
  if (patch_size < 1) throw ConfigError("skip reward: patch_size must be >= 1");
}

double patch_reward(double p_ty_selected, double p_ty_baseline) {
  return p_ty_selected - p_ty_baseline;
}

double skip_reward(bool keep, double p_ty_keep, double p_ty_drop, const SkipRewardConfig& cfg) {
  if (!keep) return 0.0;
  const double p = static_cast<double>(cfg.patch_size);
  return (p_ty_keep - p_ty_drop) - cfg.lambda * p * p;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ContractError("discounted_returns: gamma must lie in (0, 1)");
  std::vector<double> out(rewards.size());
  double running = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    running = rewards[t] + gamma * running;
    out[t] = running;
  }
  return out;
}

std::string_view to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::kAdaFocus: return "adafocus";
    case RewardKind::kConfidence: return "confidence";
    case RewardKind::kIncrements: return "increments";
  }
  return "?";
}

RewardKind parse_reward_kind(std::string_view name) {
  if (name == "adafocus") return RewardKind::kAdaFocus;
  if (name == "confidence") return RewardKind::kConfidence;
  if (name == "increments") return RewardKind::kIncrements;
  throw ConfigError("unknown reward kind '" + std::string(name) + "'");
}

std::vector<bool> EpisodeTrace::kept() const {
  std::vector<bool> k;
  for (const auto& f : frames) k.push_back(!f.skip || f.skip->keep);
  return k;
}

std::string format_trace(const EpisodeTrace& trace) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t t = 0; t < trace.frames.size(); ++t) {
    const auto& f = trace.frames[t];
    os << t + 1 << ' ' << f.patch.index << ' ';
    if (f.skip) {
      os << (f.skip->keep ? 1 : 0);
    } else {
      os << '-';
    }
    os << ' ' << f.reward << ' ' << f.ret << '\n';
  }
  return os.str();
}

EpisodeTrace rollout_stage2(const ModelBundle& bundle, const VideoSample& sample,
                            const GlanceFeatures& glance, const RolloutOptions& options,
                            std::uint64_t seed) {
  check_sample_shape(bundle, sample);
  if (options.use_skip && !bundle.skip_policy) {
    throw ConfigError("rollout: skip gate requested but the bundle has none");
  }
  const int T = sample.frames;
  const int K = bundle.grid.size();
  const int y = sample.label;
  if (static_cast<int>(glance.maps.size()) != T) throw ContractError("rollout: glance features do not match sample");

  Rng patch_rng(derive_seed(seed, "patch"));
  Rng baseline_rng(derive_seed(seed, "baseline"));
  Rng skip_rng(derive_seed(seed, "skip"));

  EpisodeTrace trace;
  trace.label = y;
  trace.has_skip = options.use_skip;
  trace.glance_maps = glance.maps;
  trace.frames.resize(T);

  // Policies only read glance features, so their recurrences run first and
  // every focus pass of the episode is batched afterwards.
  auto hp = bundle.patch_policy.initial_state();
  nn::Matrix<float> hs;
  if (options.use_skip) hs = bundle.skip_policy->initial_state();
  const bool need_baseline = options.reward == RewardKind::kAdaFocus;
  std::vector<PatchRequest> requests;
  for (int t = 0; t < T; ++t) {
    auto& rec = trace.frames[t];
    auto pr = policy_step(bundle.patch_policy, glance.maps[t], hp);
    hp = std::move(pr.state);
    rec.patch = select_patch(pr.dist, options.patch_mode, patch_rng);
    rec.value = pr.value;
    if (options.use_skip) {
      auto sr = skip_step(*bundle.skip_policy, glance.maps[t], hs);
      hs = std::move(sr.state);
      auto decision = decide_skip(sr.p_keep, SkipMode::kSample, 0.0, skip_rng);
      if (options.force_keep) {
        decision.keep = true;
        decision.log_prob = std::log(sr.p_keep);
      }
      rec.skip = decision;
      rec.skip_value = sr.value;
    }
    requests.push_back({t, bundle.grid.offsets[rec.patch.index]});
    if (need_baseline) {
      rec.baseline_index = static_cast<int>(baseline_rng.below(static_cast<std::uint64_t>(K)));
      requests.push_back({t, bundle.grid.offsets[rec.baseline_index]});
    }
  }
  const auto local = focus_pooled(bundle, sample, requests);
  const int per_frame = need_baseline ? 2 : 1;

  trace.probs.resize(bundle.config.num_classes, T);
  auto state = bundle.classifier.initial_state();
  double prev_conf = 0.0;
  for (int t = 0; t < T; ++t) {
    auto& rec = trace.frames[t];
    const nn::Matrix<float> g = glance.pooled.col(t);
    const nn::Matrix<float> l_sel = local.col(t * per_frame);

    auto s_sel = state;
    const auto p_sel = bundle.classifier.step(classifier_input(bundle, g, &l_sel), s_sel);
    rec.p_ty_selected = p_sel(y, 0);
    if (need_baseline) {
      const nn::Matrix<float> l_base = local.col(t * per_frame + 1);
      auto s_base = state;
      const auto p_base = bundle.classifier.step(classifier_input(bundle, g, &l_base), s_base);
      rec.p_ty_baseline = p_base(y, 0);
    }
    bool keep = true;
    if (options.use_skip) {
      keep = rec.skip->keep;
      auto s_drop = state;
      const auto p_drop = bundle.classifier.step(classifier_input(bundle, g, nullptr), s_drop);
      rec.p_ty_keep = rec.p_ty_selected;
      rec.p_ty_drop = p_drop(y, 0);
      rec.skip_reward = skip_reward(keep, *rec.p_ty_keep, *rec.p_ty_drop, options.skip);
      if (!keep) {
        state = std::move(s_drop);
        trace.probs.col(t) = p_drop;
      }
    }
    if (keep) {
      state = std::move(s_sel);
      trace.probs.col(t) = p_sel;
    }
    rec.p_ty_realized = trace.probs(y, t);

    switch (options.reward) {
      case RewardKind::kAdaFocus: rec.reward = patch_reward(rec.p_ty_selected, rec.p_ty_baseline); break;
      case RewardKind::kConfidence: rec.reward = rec.p_ty_selected; break;
      case RewardKind::kIncrements: rec.reward = rec.p_ty_selected - prev_conf; break;
    }
    prev_conf = rec.p_ty_realized;
  }

  std::vector<double> rewards, skip_rewards;
  for (const auto& f : trace.frames) {
    rewards.push_back(f.reward);
    skip_rewards.push_back(f.skip_reward);
  }
  const auto returns = discounted_returns(rewards, options.gamma);
  const auto skip_returns = discounted_returns(skip_rewards, options.gamma);
  for (int t = 0; t < T; ++t) {
    trace.frames[t].ret = returns[t];
    trace.frames[t].skip_return = skip_returns[t];
  }
  return trace;
}

std::vector<PpoEpisode> ppo_episodes(std::span<const EpisodeTrace> traces, PolicyKind kind) {
  std::vector<PpoEpisode> out;
  out.reserve(traces.size());
  for (const auto& tr : traces) {
    if (kind == PolicyKind::kSkip && !tr.has_skip) {
      throw ContractError("ppo_episodes: trace has no skip decisions");
    }
    PpoEpisode ep;
    ep.inputs = tr.glance_maps;
    for (const auto& f : tr.frames) {
      if (kind == PolicyKind::kPatch) {
        ep.actions.push_back(f.patch.index);
        ep.old_log_probs.push_back(f.patch.log_prob);
        ep.returns.push_back(f.ret);
        ep.values.push_back(f.value);
      } else {
        ep.actions.push_back(f.skip->keep ? 1 : 0);
        ep.old_log_probs.push_back(f.skip->log_prob);
        ep.returns.push_back(f.skip_return);
        ep.values.push_back(f.skip_value);
      }
    }
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<double> normalized_advantages(std::span<const PpoEpisode> episodes) {
  std::vector<double> adv;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.returns.size(); ++t) adv.push_back(ep.returns[t] - ep.values[t]);
  }
  if (adv.empty()) return adv;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double stddev = std::sqrt(var / n);
  for (double& a : adv) {
    a -= mean;
    if (stddev > 1e-8) a /= stddev;
  }
  return adv;
}

namespace {

template <typename S>
S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

template <typename S>
PpoLoss ppo_loss(const PolicyNet<S>& policy, std::span<const PpoEpisode> episodes,
                 std::span<const double> advantages, const PpoConfig& cfg,
                 PolicyNet<S>* grad) {
  std::size_t n_steps = 0;
  for (const auto& ep : episodes) n_steps += ep.actions.size();
  PpoLoss result;
  if (n_steps == 0) return result;
  if (advantages.size() != n_steps) throw ContractError("ppo_loss: advantage count mismatch");

  const S inv_n = S(1) / static_cast<S>(n_steps);
  const S eps = static_cast<S>(cfg.clip_epsilon);
  const S cv = static_cast<S>(cfg.value_loss_coef);
  const S ce = static_cast<S>(cfg.entropy_coef);
  const bool categorical = policy.kind() == PolicyKind::kPatch;
  std::size_t idx = 0;
  std::size_t clipped_count = 0;

  for (const auto& ep : episodes) {
    const std::size_t T = ep.actions.size();
    std::vector<typename PolicyNet<S>::StepCache> caches(T);
    std::vector<nn::Matrix<S>> dlogits(T);
    std::vector<S> dvalues(T);
    nn::Matrix<S> h = policy.initial_state();
    for (std::size_t t = 0; t < T; ++t) {
      const nn::Matrix<S> x = ep.inputs[t].template cast<S>();
      auto out = policy.step(x, h, grad ? &caches[t] : nullptr);
      h = out.hidden;
      const int a = ep.actions[t];
      const S A = static_cast<S>(advantages[idx]);

      S logp_a, entropy;
      nn::Matrix<S> dlogp_dz(out.logits.rows(), 1);
      nn::Matrix<S> dH_dz(out.logits.rows(), 1);
      if (categorical) {
        const S m = out.logits.maxCoeff();
        const S lse = m + std::log((out.logits.array() - m).exp().sum());
        const nn::Matrix<S> logp = (out.logits.array() - lse).matrix();
        const nn::Matrix<S> p = logp.array().exp().matrix();
        if (a < 0 || a >= p.rows()) throw ContractError("ppo_loss: action out of range");
        logp_a = logp(a, 0);
        entropy = -(p.array() * logp.array()).sum();
        dlogp_dz = -p;
        dlogp_dz(a, 0) += S(1);
        dH_dz = (-(p.array() * (logp.array() + entropy))).matrix();
      } else {
        const S z = out.logits(0, 0);
        const S p = S(1) / (S(1) + std::exp(-z));
        const S log_p = -softplus(-z), log_q = -softplus(z);
        logp_a = a == 1 ? log_p : log_q;
        entropy = -(p * log_p + (S(1) - p) * log_q);
        dlogp_dz(0, 0) = a == 1 ? S(1) - p : -p;
        dH_dz(0, 0) = -z * p * (S(1) - p);
      }

      const S ratio = std::exp(logp_a - static_cast<S>(ep.old_log_probs[t]));
      const S clamped = std::clamp(ratio, S(1) - eps, S(1) + eps);
      const S surr1 = ratio * A, surr2 = clamped * A;
      const bool clipped_branch = surr2 < surr1;
      const S surr = clipped_branch ? surr2 : surr1;
      const S verr = out.value - static_cast<S>(ep.returns[t]);

      result.total += static_cast<double>(-surr * inv_n + cv * verr * verr * inv_n - ce * entropy * inv_n);
      result.stats.surrogate += static_cast<double>(surr);
      result.stats.value_loss += static_cast<double>(verr * verr);
      result.stats.entropy += static_cast<double>(entropy);
      const double dev = std::abs(static_cast<double>(ratio) - 1.0);
      if (dev > cfg.clip_epsilon) ++clipped_count;
      result.stats.max_ratio_deviation = std::max(result.stats.max_ratio_deviation, dev);
      if (clipped_branch) {
        result.stats.max_clipped_ratio_deviation =
            std::max(result.stats.max_clipped_ratio_deviation,
                     std::abs(static_cast<double>(clamped) - 1.0));
      }

      if (grad) {
        const S dlogp = clipped_branch ? S(0) : -A * ratio * inv_n;
        dlogits[t] = dlogp * dlogp_dz - ce * inv_n * dH_dz;
        dvalues[t] = S(2) * cv * verr * inv_n;
      }
      ++idx;
    }
    if (grad) {
      nn::Matrix<S> dh = nn::Matrix<S>::Zero(policy.shape().hidden_size, 1);
      for (std::size_t t = T; t-- > 0;) {
        dh = policy.backward_step(caches[t], dlogits[t], dvalues[t], dh, *grad);
      }
    }
  }
  const double n = static_cast<double>(n_steps);
  result.stats.surrogate /= n;
  result.stats.value_loss /= n;
  result.stats.entropy /= n;
  result.stats.clip_fraction = static_cast<double>(clipped_count) / n;
  return result;
}

template PpoLoss ppo_loss<float>(const PolicyNet<float>&, std::span<const PpoEpisode>,
                                 std::span<const double>, const PpoConfig&, PolicyNet<float>*);
template PpoLoss ppo_loss<double>(const PolicyNet<double>&, std::span<const PpoEpisode>,
                                  std::span<const double>, const PpoConfig&, PolicyNet<double>*);

PpoStats ppo_update(PolicyNet<float>& policy, nn::AdamOptimizer<float>& optimizer,
                    std::span<const PpoEpisode> episodes, const PpoConfig& cfg) {
  cfg.validate();
  const auto advantages = normalized_advantages(episodes);
  PolicyNet<float> grad = policy;
  nn::ParamList<float> params, grads;
  policy.collect(params, "policy");
  grad.collect(grads, "policy");

  PpoStats stats;
  for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
    nn::zero_params(grads);
    const auto loss = ppo_loss(policy, episodes, advantages, cfg, &grad);
    if (!std::isfinite(loss.total)) {
      std::ostringstream os;
      os << "ppo: non-finite loss at epoch " << epoch << " (surrogate " << loss.stats.surrogate
         << ", value " << loss.stats.value_loss << ", entropy " << loss.stats.entropy << ")";
      throw TrainingError(os.str());
    }
    nn::clip_grad_norm(grads, cfg.max_grad_norm);
    optimizer.step(params, grads);
    stats.epochs.push_back(loss.stats);
  }
  return stats;
}

Calibration calibrate_threshold(std::span<const double> scores, double eta) {
  if (scores.empty()) throw ContractError("calibrate_threshold: no scores");
  if (!(eta > 0.0 && eta <= 1.0)) throw ContractError("calibrate_threshold: eta must lie in (0, 1]");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto n = sorted.size();
  // Tolerance keeps eta * n = 7.000000001 from rounding up to 8.
  auto n_keep = static_cast<std::size_t>(std::ceil(eta * static_cast<double>(n) - 1e-9));
  n_keep = std::clamp<std::size_t>(n_keep, 1, n);
  Calibration c;
  c.rho = sorted[n_keep - 1];
  const auto kept = static_cast<std::size_t>(
      std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= c.rho; }));
  c.kept_fraction = static_cast<double>(kept) / static_cast<double>(n);
  c.degenerate = kept > n_keep;
  return c;
}

}  // namespace adafocus
