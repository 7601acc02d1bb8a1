#include "adafocus/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace adafocus {

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
    case Stage::kStage3: return "stage3";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  if (name == "pretrain") return Stage::kPretrain;
  if (name == "stage1") return Stage::kStage1;
  if (name == "stage2") return Stage::kStage2;
  if (name == "stage3") return Stage::kStage3;
  throw ConfigError("unknown stage '" + std::string(name) + "'");
}

StageConfig StageConfig::defaults(Stage stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::kPretrain: c.epochs = 12; break;
    case Stage::kStage1: c.epochs = 5; break;
    case Stage::kStage2: c.epochs = 15; break;
    case Stage::kStage3:
      c.epochs = 5;
      c.learning_rate = 0.01;
      break;
  }
  return c;
}

void StageConfig::validate() const {
  const std::string name(to_string(stage));
  if (epochs < 0) throw ConfigError(name + ": epochs must be >= 0");
  if (batch_size < 1) throw ConfigError(name + ": batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError(name + ": learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError(name + ": momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError(name + ": weight_decay must be >= 0");
  if (!(max_grad_norm >= 0.0)) throw ConfigError(name + ": max_grad_norm must be >= 0");
  if (!(min_keep_fraction > 0.0 && min_keep_fraction <= 1.0)) {
    throw ConfigError(name + ": min_keep_fraction must lie in (0, 1]");
  }
  if (train_focus && stage != Stage::kStage3) {
    throw ConfigError(name + ": train_focus only applies to stage3");
  }
  if (!(skip_lambda >= 0.0)) throw ConfigError(name + ": skip_lambda must be >= 0");
  ppo.validate();
}

std::vector<Component> trainable_components(const StageConfig& cfg, const BundleConfig& bundle) {
  switch (cfg.stage) {
    case Stage::kPretrain: return {Component::kGlance, Component::kFocus};
    case Stage::kStage1: return {Component::kFocus, Component::kClassifier};
    case Stage::kStage2:
      if (bundle.adafocus_plus) return {Component::kPatchPolicy, Component::kSkipPolicy};
      return {Component::kPatchPolicy};
    case Stage::kStage3:
      if (cfg.train_focus) return {Component::kFocus, Component::kClassifier};
      return {Component::kClassifier};
  }
  return {};
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  return order;
}

long batches_per_epoch(std::size_t n, int batch) {
  return static_cast<long>((n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

nn::SgdConfig sgd_config(const StageConfig& cfg, long total_steps) {
  nn::SgdConfig s;
  s.learning_rate = cfg.learning_rate;
  s.momentum = cfg.momentum;
  s.weight_decay = cfg.weight_decay;
  s.nesterov = true;
  s.total_steps = total_steps;
  return s;
}

std::string sgd_note(const StageConfig& cfg) {
  std::ostringstream os;
  os << "sgd nesterov lr=" << cfg.learning_rate << " momentum=" << cfg.momentum
     << " wd=" << cfg.weight_decay << " cosine epochs=" << cfg.epochs << " batch=" << cfg.batch_size;
  return os.str();
}

void check_split(const ModelBundle& bundle, const DatasetSplit& split) {
  if (split.samples.empty()) throw ConfigError("training split is empty");
  for (const auto& s : split.samples) check_sample_shape(bundle, s);
  if (split.config.num_classes != bundle.config.num_classes) {
    throw ContractError("split has " + std::to_string(split.config.num_classes) +
                        " classes, bundle expects " + std::to_string(bundle.config.num_classes));
  }
}

std::vector<GlanceFeatures> glance_cache(const ModelBundle& bundle, const DatasetSplit& split) {
  std::vector<GlanceFeatures> cache;
  cache.reserve(split.samples.size());
  for (const auto& s : split.samples) cache.push_back(compute_glance(bundle, s));
  return cache;
}

int argmax_col(const nn::Matrix<float>& m, Eigen::Index col) {
  Eigen::Index idx = 0;
  m.col(col).maxCoeff(&idx);
  return static_cast<int>(idx);
}

// Per-image channel max over the spatial map, with the winning column for backprop.
struct MaxPooled {
  nn::Matrix<float> values;  // [c x count]
  std::vector<Eigen::Index> where;  // column in fm.data per (channel, image), row-major
};

MaxPooled max_pool(const nn::FeatureMap<float>& fm) {
  const Eigen::Index plane = static_cast<Eigen::Index>(fm.height) * fm.width;
  MaxPooled out;
  out.values.resize(fm.channels(), fm.count);
  out.where.resize(static_cast<std::size_t>(fm.channels()) * fm.count);
  for (Eigen::Index c = 0; c < fm.channels(); ++c) {
    for (int i = 0; i < fm.count; ++i) {
      Eigen::Index idx = 0;
      out.values(c, i) = fm.data.row(c).segment(i * plane, plane).maxCoeff(&idx);
      out.where[static_cast<std::size_t>(c * fm.count + i)] = i * plane + idx;
    }
  }
  return out;
}

nn::Matrix<float> max_pool_backward(const MaxPooled& mp, const nn::Matrix<float>& d, Eigen::Index cols) {
  nn::Matrix<float> out = nn::Matrix<float>::Zero(d.rows(), cols);
  for (Eigen::Index c = 0; c < d.rows(); ++c) {
    for (Eigen::Index i = 0; i < d.cols(); ++i) {
      out(c, mp.where[static_cast<std::size_t>(c * d.cols() + i)]) = d(c, i);
    }
  }
  return out;
}

/// Softmax cross-entropy of a linear probe over a column batch. Returns the
/// mean loss and fills dlogits (already divided by the batch size).
double probe_loss(const nn::Matrix<float>& logits, std::span<const int> labels,
                  nn::Matrix<float>& dlogits, int& correct) {
  const auto probs = nn::softmax_columns(logits);
  dlogits = probs;
  double loss = 0.0;
  const float inv = 1.0f / static_cast<float>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    loss -= std::log(std::max(static_cast<double>(probs(labels[i], c)), 1e-30));
    dlogits(labels[i], c) -= 1.0f;
    if (argmax_col(probs, c) == labels[i]) ++correct;
  }
  dlogits *= inv;
  return loss / static_cast<double>(labels.size());
}

/// Builds [in x T] classifier inputs for one video from pooled glance
/// features and local columns; a negative column index means "skipped".
nn::Matrix<float> sequence_inputs(const ModelBundle& bundle, const nn::Matrix<float>& glance_pooled,
                                  const nn::Matrix<float>& local, std::span<const int> local_cols) {
  const int T = static_cast<int>(local_cols.size());
  nn::Matrix<float> x(bundle.config.classifier_input(), T);
  for (int t = 0; t < T; ++t) {
    const nn::Matrix<float> g = glance_pooled.col(t);
    if (local_cols[t] >= 0) {
      const nn::Matrix<float> l = local.col(local_cols[t]);
      x.col(t) = classifier_input(bundle, g, &l);
    } else {
      x.col(t) = classifier_input(bundle, g, nullptr);
    }
  }
  return x;
}

struct PatchBatch {
  std::vector<std::vector<float>> patches;
  int count() const { return static_cast<int>(patches.size()); }
  nn::Matrix<float> pack(int channels, int p) const {
    std::vector<std::span<const float>> views(patches.begin(), patches.end());
    return nn::pack_images<float>(views, channels, p, p);
  }
};

/// Shared supervised loop of stage1 and stage3: focus forward over the
/// chosen patches, classifier over each video, optional backprop into f_L.
struct SupervisedStep {
  double loss = 0.0;
  int correct = 0;
};

SupervisedStep supervised_step(ModelBundle& bundle, const DatasetSplit& train,
                               const std::vector<GlanceFeatures>& glance,
                               std::span<const std::size_t> videos,
                               const std::vector<std::vector<PatchOffset>>& offsets,
                               const std::vector<std::vector<bool>>& kept, bool train_focus,
                               nn::ConvBackbone<float>* focus_grad, nn::Classifier<float>& cls_grad) {
  const int P = bundle.config.patch_size;
  const int C = bundle.config.channels;
  const int H = bundle.config.frame_size;
  PatchBatch batch;
  std::vector<std::vector<int>> cols(videos.size());
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const auto& sample = train.samples[videos[i]];
    for (int t = 0; t < sample.frames; ++t) {
      if (kept[i][t]) {
        cols[i].push_back(batch.count());
        batch.patches.push_back(crop(sample.frame(t), C, H, H, offsets[i][t], P));
      } else {
        cols[i].push_back(-1);
      }
    }
  }
  nn::ConvBackbone<float>::Cache focus_cache;
  nn::FeatureMap<float> fm;
  nn::Matrix<float> local;
  if (batch.count() > 0) {
    fm = bundle.focus.forward(batch.pack(C, P), batch.count(), P, P,
                              train_focus ? &focus_cache : nullptr);
    local = nn::pool(fm);
  }
  nn::Matrix<float> dlocal;
  if (train_focus) dlocal = nn::Matrix<float>::Zero(local.rows(), local.cols());

  SupervisedStep out;
  const float inv_batch = 1.0f / static_cast<float>(videos.size());
  const int gc = bundle.config.feature_reuse ? bundle.config.glance_channels() : 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const auto& sample = train.samples[videos[i]];
    const auto x = sequence_inputs(bundle, glance[videos[i]].pooled, local, cols[i]);
    nn::Classifier<float>::SequenceCache cache;
    const auto probs = bundle.classifier.forward_sequence(x, &cache);
    auto [loss, dprobs] = nn::sequence_cross_entropy(probs, sample.label);
    out.loss += loss;
    if (argmax_col(probs, probs.cols() - 1) == sample.label) ++out.correct;
    dprobs *= inv_batch;
    const auto dx = bundle.classifier.backward_sequence(cache, dprobs, cls_grad, train_focus);
    if (train_focus) {
      for (int t = 0; t < sample.frames; ++t) {
        if (cols[i][t] >= 0) dlocal.col(cols[i][t]) = dx.col(t).bottomRows(dx.rows() - gc);
      }
    }
  }
  if (train_focus && batch.count() > 0) {
    const auto dfm = nn::pool_backward(dlocal, fm.count, fm.height, fm.width);
    bundle.focus.backward(focus_cache, dfm, *focus_grad, false);
  }
  out.loss /= static_cast<double>(videos.size());
  return out;
}

PatchOffset glyph_centred_offset(const VideoSample& s, int t, int glyph, int P, Rng& rng) {
  const int H = s.height;
  const int slack = std::max(0, (P - glyph) / 2);
  auto axis = [&](int g) {
    const int centred = g + glyph / 2 - P / 2;
    const int o = centred + static_cast<int>(rng.between(-slack, slack));
    return std::clamp(o, 0, H - P);
  };
  const auto& pos = s.glyph_track[static_cast<std::size_t>(t)];
  const int y = axis(pos.y);
  const int x = axis(pos.x);
  return {y, x};
}

}  // namespace

// ---- pretrain ----

StageReport pretrain(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                     std::uint64_t seed, const EpochCallback& log) {
  cfg.validate();
  check_split(bundle, train);
  const auto& bc = bundle.config;
  const int H = bc.frame_size, P = bc.patch_size, C = bc.channels;
  Rng rng(seed);

  nn::Linear<float> gprobe(bc.glance_channels(), bc.num_classes);
  nn::Linear<float> lprobe(bc.focus_channels(), bc.num_classes);
  Rng probe_rng(derive_seed(seed, "probes"));
  gprobe.init(probe_rng);
  lprobe.init(probe_rng);

  nn::ConvBackbone<float> glance_grad = bundle.glance, focus_grad = bundle.focus;
  nn::Linear<float> gprobe_grad = gprobe, lprobe_grad = lprobe;
  nn::ParamList<float> gp, gg, lp, lg;
  bundle.glance.collect(gp, "glance");
  gprobe.collect(gp, "glance_probe");
  glance_grad.collect(gg, "glance");
  gprobe_grad.collect(gg, "glance_probe");
  bundle.focus.collect(lp, "focus");
  lprobe.collect(lp, "focus_probe");
  focus_grad.collect(lg, "focus");
  lprobe_grad.collect(lg, "focus_probe");

  const long per_epoch = batches_per_epoch(train.samples.size(), cfg.batch_size);
  nn::SgdOptimizer<float> gopt(sgd_config(cfg, per_epoch * cfg.epochs));
  nn::SgdOptimizer<float> lopt(sgd_config(cfg, per_epoch * cfg.epochs));

  StageReport report;
  report.stage = Stage::kPretrain;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.samples.size(), rng);
    EpochLog entry;
    entry.epoch = epoch;
    int gcorrect = 0, lcorrect = 0;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::span<const float>> frames;
      PatchBatch patches;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train.samples[order[i]];
        const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.frames)));
        frames.push_back(s.frame(t));
        patches.patches.push_back(
            crop(s.frame(t), C, H, H, glyph_centred_offset(s, t, train.config.glyph_size, P, rng), P));
        labels.push_back(s.label);
      }
      const int n = static_cast<int>(labels.size());

      nn::zero_params(gg);
      nn::ConvBackbone<float>::Cache gcache;
      const auto gfm = bundle.glance.forward(nn::pack_images<float>(frames, C, H, H), n, H, H, &gcache);
      const auto gpooled = max_pool(gfm);
      nn::Matrix<float> dlogits;
      loss_sum += probe_loss(gprobe.forward(gpooled.values), labels, dlogits, gcorrect);
      const auto dgpooled = gprobe.backward(gpooled.values, dlogits, gprobe_grad, true);
      bundle.glance.backward(gcache, max_pool_backward(gpooled, dgpooled, gfm.data.cols()), glance_grad,
                             false);
      nn::clip_grad_norm(gg, cfg.max_grad_norm);
      gopt.step(gp, gg);

      nn::zero_params(lg);
      nn::ConvBackbone<float>::Cache lcache;
      const auto lfm = bundle.focus.forward(patches.pack(C, P), n, P, P, &lcache);
      const auto lpooled = nn::pool(lfm);
      probe_loss(lprobe.forward(lpooled), labels, dlogits, lcorrect);
      const auto dlpooled = lprobe.backward(lpooled, dlogits, lprobe_grad, true);
      bundle.focus.backward(lcache, nn::pool_backward(dlpooled, n, lfm.height, lfm.width),
                            focus_grad, false);
      nn::clip_grad_norm(lg, cfg.max_grad_norm);
      lopt.step(lp, lg);
    }
    if (!std::isfinite(loss_sum)) {
      throw TrainingError("pretrain: non-finite loss in epoch " + std::to_string(epoch));
    }
    const double n = static_cast<double>(train.samples.size());
    entry.loss = loss_sum / static_cast<double>(per_epoch);
    entry.accuracy = gcorrect / n;
    entry.aux_accuracy = lcorrect / n;
    report.epochs.push_back(entry);
    if (log) log(Stage::kPretrain, entry);
  }
  report.glance_probe = gprobe;
  report.focus_probe = lprobe;
  bundle.optimizer_note = sgd_note(cfg);
  return report;
}

double glance_probe_accuracy(const ModelBundle& bundle, const nn::Linear<float>& probe,
                             const DatasetSplit& split) {
  if (split.samples.empty()) throw ContractError("glance_probe_accuracy: empty split");
  int correct = 0;
  const int H = bundle.config.frame_size, C = bundle.config.channels;
  for (const auto& s : split.samples) {
    check_sample_shape(bundle, s);
    const std::span<const float> frame = s.frame(0);
    const auto fm = bundle.glance.forward(nn::pack_images<float>(std::span(&frame, 1), C, H, H), 1,
                                          H, H, nullptr);
    if (argmax_col(probe.forward(max_pool(fm).values), 0) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.samples.size());
}

// ---- stage 1 ----

StageReport stage1_warmup(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                          std::uint64_t seed, const EpochCallback& log) {
  cfg.validate();
  check_split(bundle, train);
  const int H = bundle.config.frame_size, P = bundle.config.patch_size;
  Rng rng(seed);
  const auto glance = glance_cache(bundle, train);

  nn::ConvBackbone<float> focus_grad = bundle.focus;
  nn::Classifier<float> cls_grad = bundle.classifier;
  nn::ParamList<float> fp, fg, cp, cg;
  bundle.focus.collect(fp, "focus");
  focus_grad.collect(fg, "focus");
  bundle.classifier.collect(cp, "classifier");
  cls_grad.collect(cg, "classifier");
  const long per_epoch = batches_per_epoch(train.samples.size(), cfg.batch_size);
  nn::SgdOptimizer<float> fopt(sgd_config(cfg, per_epoch * cfg.epochs));
  nn::SgdOptimizer<float> copt(sgd_config(cfg, per_epoch * cfg.epochs));

  StageReport report;
  report.stage = Stage::kStage1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.samples.size(), rng);
    EpochLog entry;
    entry.epoch = epoch;
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> videos(order.data() + start, end - start);
      std::vector<std::vector<PatchOffset>> offsets;
      std::vector<std::vector<bool>> kept;
      for (std::size_t v : videos) {
        const int T = train.samples[v].frames;
        std::vector<PatchOffset> o;
        for (int t = 0; t < T; ++t) {
          const int y = static_cast<int>(rng.between(0, H - P));
          const int x = static_cast<int>(rng.between(0, H - P));
          o.push_back({y, x});
        }
        offsets.push_back(std::move(o));
        kept.emplace_back(static_cast<std::size_t>(T), true);
      }
      nn::zero_params(fg);
      nn::zero_params(cg);
      const auto step = supervised_step(bundle, train, glance, videos, offsets, kept, true,
                                        &focus_grad, cls_grad);
      nn::clip_grad_norm(fg, cfg.max_grad_norm);
      nn::clip_grad_norm(cg, cfg.max_grad_norm);
      fopt.step(fp, fg);
      copt.step(cp, cg);
      loss_sum += step.loss;
      correct += step.correct;
    }
    if (!std::isfinite(loss_sum)) {
      throw TrainingError("stage1: non-finite loss in epoch " + std::to_string(epoch));
    }
    entry.loss = loss_sum / static_cast<double>(per_epoch);
    entry.accuracy = correct / static_cast<double>(train.samples.size());
    report.epochs.push_back(entry);
    if (log) log(Stage::kStage1, entry);
  }
  bundle.optimizer_note = sgd_note(cfg);
  return report;
}

// ---- stage 2 ----

StageReport stage2_policy_learning(ModelBundle& bundle, const DatasetSplit& train,
                                   const StageConfig& cfg, std::uint64_t seed,
                                   const EpochCallback& log) {
  cfg.validate();
  check_split(bundle, train);
  Rng rng(seed);
  const auto glance = glance_cache(bundle, train);
  const bool use_skip = bundle.skip_policy.has_value();

  nn::AdamConfig adam;
  adam.learning_rate = cfg.ppo.learning_rate;
  nn::AdamOptimizer<float> patch_opt(adam), skip_opt(adam);

  RolloutOptions ro;
  ro.patch_mode = SelectMode::kSample;
  ro.use_skip = use_skip;
  ro.reward = cfg.reward;
  ro.gamma = cfg.ppo.gamma;
  ro.skip.lambda = cfg.skip_lambda;
  ro.skip.patch_size = bundle.config.patch_size;

  StageReport report;
  report.stage = Stage::kStage2;
  const std::size_t n = train.samples.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, rng);
    EpochLog entry;
    entry.epoch = epoch;
    double ret_sum = 0.0, clip_sum = 0.0, surrogate_sum = 0.0;
    long kept = 0, frames = 0;
    int correct = 0, updates = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.ppo.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.ppo.batch_size));
      std::vector<EpisodeTrace> traces;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t v = order[i];
        const auto episode_seed = derive_seed(seed, static_cast<std::uint64_t>(epoch) * n + i);
        traces.push_back(rollout_stage2(bundle, train.samples[v], glance[v], ro, episode_seed));
        const auto& tr = traces.back();
        ret_sum += tr.frames.front().ret;
        if (argmax_col(tr.probs, tr.probs.cols() - 1) == tr.label) ++correct;
        for (bool k : tr.kept()) {
          kept += k ? 1 : 0;
          ++frames;
        }
      }
      const auto stats = ppo_update(bundle.patch_policy, patch_opt,
                                    ppo_episodes(traces, PolicyKind::kPatch), cfg.ppo);
      clip_sum += stats.last().clip_fraction;
      surrogate_sum += stats.last().surrogate;
      if (use_skip) {
        ppo_update(*bundle.skip_policy, skip_opt, ppo_episodes(traces, PolicyKind::kSkip), cfg.ppo);
      }
      ++updates;
    }
    entry.mean_return = ret_sum / static_cast<double>(n);
    entry.accuracy = correct / static_cast<double>(n);
    entry.keep_rate = frames > 0 ? static_cast<double>(kept) / static_cast<double>(frames) : 1.0;
    entry.clip_fraction = clip_sum / updates;
    entry.loss = -surrogate_sum / updates;
    report.epochs.push_back(entry);
    if (log) log(Stage::kStage2, entry);
  }
  std::ostringstream note;
  note << "adam lr=" << cfg.ppo.learning_rate << " ppo clip=" << cfg.ppo.clip_epsilon
       << " epochs_per_batch=" << cfg.ppo.epochs_per_batch << " batch=" << cfg.ppo.batch_size
       << " gamma=" << cfg.ppo.gamma << " reward=" << to_string(cfg.reward);
  bundle.optimizer_note = note.str();
  return report;
}

// ---- stage 3 ----

StageReport stage3_finetune(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                            std::uint64_t seed, const EpochCallback& log) {
  cfg.validate();
  check_split(bundle, train);
  Rng rng(seed);
  const auto glance = glance_cache(bundle, train);
  const bool use_skip = bundle.skip_policy.has_value();

  nn::ConvBackbone<float> focus_grad = bundle.focus;
  nn::Classifier<float> cls_grad = bundle.classifier;
  nn::ParamList<float> fp, fg, cp, cg;
  bundle.focus.collect(fp, "focus");
  focus_grad.collect(fg, "focus");
  bundle.classifier.collect(cp, "classifier");
  cls_grad.collect(cg, "classifier");
  const long per_epoch = batches_per_epoch(train.samples.size(), cfg.batch_size);
  nn::SgdOptimizer<float> fopt(sgd_config(cfg, per_epoch * cfg.epochs));
  nn::SgdOptimizer<float> copt(sgd_config(cfg, per_epoch * cfg.epochs));
  const auto patch_mode = cfg.sample_policy ? SelectMode::kSample : SelectMode::kArgmax;
  // A gate trained with a small patch cost keeps nearly every frame when
  // sampled, so the classifier would never see a skipped frame. Each video
  // instead thresholds the gate at the rho keeping a fraction drawn from
  // [min_keep_fraction, 1] of all training frames.
  std::vector<double> sorted_scores;
  if (use_skip) {
    sorted_scores = skip_scores(bundle, train);
    std::sort(sorted_scores.begin(), sorted_scores.end(), std::greater<>());
  }
  auto draw_rho = [&] {
    const double eta = rng.uniform(cfg.min_keep_fraction, 1.0);
    const auto n = static_cast<double>(sorted_scores.size());
    const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(eta * n - 1e-9)), 1,
                                              sorted_scores.size());
    return sorted_scores[keep - 1];
  };

  StageReport report;
  report.stage = Stage::kStage3;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.samples.size(), rng);
    EpochLog entry;
    entry.epoch = epoch;
    double loss_sum = 0.0;
    int correct = 0;
    long kept_count = 0, frame_count = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> videos(order.data() + start, end - start);
      std::vector<std::vector<PatchOffset>> offsets;
      std::vector<std::vector<bool>> kept;
      for (std::size_t v : videos) {
        const auto& g = glance[v];
        auto hp = bundle.patch_policy.initial_state();
        nn::Matrix<float> hs;
        if (use_skip) hs = bundle.skip_policy->initial_state();
        std::vector<PatchOffset> o;
        std::vector<bool> k;
        const double skip_rho = use_skip ? draw_rho() : 0.0;
        for (std::size_t t = 0; t < g.maps.size(); ++t) {
          auto pr = policy_step(bundle.patch_policy, g.maps[t], hp);
          hp = std::move(pr.state);
          o.push_back(bundle.grid.offsets[select_patch(pr.dist, patch_mode, rng).index]);
          bool keep = true;
          if (use_skip) {
            auto sr = skip_step(*bundle.skip_policy, g.maps[t], hs);
            hs = std::move(sr.state);
            keep = decide_skip(sr.p_keep, SkipMode::kThreshold, skip_rho, rng).keep;
          }
          k.push_back(keep);
          kept_count += keep ? 1 : 0;
          ++frame_count;
        }
        offsets.push_back(std::move(o));
        kept.push_back(std::move(k));
      }
      nn::zero_params(fg);
      nn::zero_params(cg);
      const auto step = supervised_step(bundle, train, glance, videos, offsets, kept,
                                        cfg.train_focus, &focus_grad, cls_grad);
      if (cfg.train_focus) {
        nn::clip_grad_norm(fg, cfg.max_grad_norm);
        fopt.step(fp, fg);
      }
      nn::clip_grad_norm(cg, cfg.max_grad_norm);
      copt.step(cp, cg);
      loss_sum += step.loss;
      correct += step.correct;
    }
    if (!std::isfinite(loss_sum)) {
      throw TrainingError("stage3: non-finite loss in epoch " + std::to_string(epoch));
    }
    entry.loss = loss_sum / static_cast<double>(per_epoch);
    entry.accuracy = correct / static_cast<double>(train.samples.size());
    entry.keep_rate = frame_count > 0 ? static_cast<double>(kept_count) / frame_count : 1.0;
    report.epochs.push_back(entry);
    if (log) log(Stage::kStage3, entry);
  }
  bundle.optimizer_note = sgd_note(cfg);
  return report;
}

// ---- orchestration ----

StageReport run_stage(ModelBundle& bundle, const DatasetSplit& train, const StageConfig& cfg,
                      std::uint64_t seed, const EpochCallback& log) {
  auto has = [&](std::string_view tag) {
    return std::find(bundle.lineage.begin(), bundle.lineage.end(), tag) != bundle.lineage.end();
  };
  if (cfg.stage == Stage::kStage2 && !has("stage1")) {
    throw ConfigError("stage2 requires a bundle that completed stage1");
  }
  if (cfg.stage == Stage::kStage3 && !has("stage2")) {
    throw ConfigError("stage3 requires a bundle that completed stage2");
  }
  const auto trainable = trainable_components(cfg, bundle.config);
  constexpr Component all[] = {Component::kGlance, Component::kFocus, Component::kClassifier,
                               Component::kPatchPolicy, Component::kSkipPolicy};
  std::vector<std::pair<Component, std::uint64_t>> frozen;
  for (Component c : all) {
    if (std::find(trainable.begin(), trainable.end(), c) == trainable.end()) {
      frozen.emplace_back(c, bundle.hash(c));
    }
  }

  StageReport report;
  switch (cfg.stage) {
    case Stage::kPretrain: report = pretrain(bundle, train, cfg, seed, log); break;
    case Stage::kStage1: report = stage1_warmup(bundle, train, cfg, seed, log); break;
    case Stage::kStage2: report = stage2_policy_learning(bundle, train, cfg, seed, log); break;
    case Stage::kStage3: report = stage3_finetune(bundle, train, cfg, seed, log); break;
  }
  for (const auto& [c, h] : frozen) {
    if (bundle.hash(c) != h) {
      throw ContractError(std::string(to_string(cfg.stage)) + " modified frozen component " +
                          std::string(to_string(c)));
    }
  }
  bundle.stage = std::string(to_string(cfg.stage));
  bundle.lineage.push_back(bundle.stage);
  return report;
}

std::vector<double> skip_scores(const ModelBundle& bundle, const DatasetSplit& split) {
  if (!bundle.skip_policy) throw ConfigError("skip scores: bundle has no skip gate");
  std::vector<double> scores;
  for (const auto& s : split.samples) {
    const auto g = compute_glance(bundle, s);
    auto h = bundle.skip_policy->initial_state();
    for (const auto& map : g.maps) {
      auto r = skip_step(*bundle.skip_policy, map, h);
      h = std::move(r.state);
      scores.push_back(r.p_keep);
    }
  }
  return scores;
}

Calibration calibrate(ModelBundle& bundle, const DatasetSplit& split, double eta) {
  const auto scores = skip_scores(bundle, split);
  const auto c = calibrate_threshold(scores, eta);
  bundle.rho = c.rho;
  return c;
}

// ---- inference ----

std::string_view to_string(PolicyVariant v) {
  switch (v) {
    case PolicyVariant::kLearned: return "learned";
    case PolicyVariant::kRandom: return "random";
    case PolicyVariant::kCentral: return "central";
    case PolicyVariant::kGaussian: return "gaussian";
  }
  return "?";
}

PolicyVariant parse_policy_variant(std::string_view name) {
  if (name == "learned") return PolicyVariant::kLearned;
  if (name == "random") return PolicyVariant::kRandom;
  if (name == "central") return PolicyVariant::kCentral;
  if (name == "gaussian") return PolicyVariant::kGaussian;
  throw ConfigError("unknown policy variant '" + std::string(name) + "'");
}

int InferenceResult::prediction() const { return argmax_col(probs, probs.cols() - 1); }

int fixed_policy_choice(const PatchGrid& grid, PolicyVariant variant, Rng& rng) {
  switch (variant) {
    case PolicyVariant::kRandom:
      return static_cast<int>(rng.below(static_cast<std::uint64_t>(grid.size())));
    case PolicyVariant::kCentral: return grid.central();
    case PolicyVariant::kGaussian: {
      const double h = grid.frame_size;
      const double sigma = h / 4.0;
      const double lo = grid.patch_size / 2.0, hi = h - grid.patch_size / 2.0;
      const double cy = std::clamp(h / 2.0 + sigma * rng.normal(), lo, hi);
      const double cx = std::clamp(h / 2.0 + sigma * rng.normal(), lo, hi);
      return grid.nearest(cy, cx);
    }
    case PolicyVariant::kLearned: break;
  }
  throw ContractError("fixed_policy_choice: the learned policy is not a fixed variant");
}

namespace {

double resolve_rho(const ModelBundle& bundle, const InferenceOptions& options) {
  if (!options.use_skip) return 0.0;
  if (!bundle.skip_policy) throw ConfigError("inference: skip gate requested but the bundle has none");
  if (options.rho) return *options.rho;
  if (!bundle.rho) throw ConfigError("inference: skip gate threshold rho is not calibrated");
  return *bundle.rho;
}

ComponentCosts charged_costs(const ModelBundle& bundle, const InferenceOptions& options) {
  auto c = bundle.costs();
  if (options.policy != PolicyVariant::kLearned) c.patch_policy = 0;
  if (!options.use_skip) c.skip_policy = 0;
  return c;
}

}  // namespace

OnlineSession::OnlineSession(const ModelBundle& bundle, const InferenceOptions& options)
    : bundle_(bundle),
      options_(options),
      rho_(resolve_rho(bundle, options)),
      rng_(derive_seed(options.seed, "fixed_policy")),
      patch_state_(bundle.patch_policy.initial_state()),
      classifier_state_(bundle.classifier.initial_state()) {
  if (options_.use_skip) skip_state_ = bundle.skip_policy->initial_state();
}

nn::Matrix<float> OnlineSession::push(std::span<const float> frame) {
  const auto& c = bundle_.config;
  const int H = c.frame_size, C = c.channels, P = c.patch_size;
  if (frame.size() != static_cast<std::size_t>(C) * H * H) {
    throw ContractError("online: frame has the wrong size");
  }
  const auto fm = bundle_.glance.forward(nn::pack_images<float>(std::span(&frame, 1), C, H, H), 1, H,
                                         H, nullptr);
  const nn::Matrix<float> map = fm.image(0);
  const nn::Matrix<float> pooled = nn::pool(fm);

  int index;
  if (options_.policy == PolicyVariant::kLearned) {
    auto pr = policy_step(bundle_.patch_policy, map, patch_state_);
    patch_state_ = std::move(pr.state);
    index = select_patch(pr.dist, SelectMode::kArgmax, rng_).index;
  } else {
    index = fixed_policy_choice(bundle_.grid, options_.policy, rng_);
  }
  bool keep = true;
  if (options_.use_skip) {
    auto sr = skip_step(*bundle_.skip_policy, map, skip_state_);
    skip_state_ = std::move(sr.state);
    keep = decide_skip(sr.p_keep, SkipMode::kThreshold, rho_, rng_).keep;
  }
  nn::Matrix<float> x;
  if (keep) {
    const auto patch = crop(frame, C, H, H, bundle_.grid.offsets[index], P);
    const std::span<const float> view(patch);
    const auto lfm = bundle_.focus.forward(nn::pack_images<float>(std::span(&view, 1), C, P, P), 1,
                                           P, P, nullptr);
    const nn::Matrix<float> local = nn::pool(lfm);
    x = classifier_input(bundle_, pooled, &local);
  } else {
    x = classifier_input(bundle_, pooled, nullptr);
  }
  patches_.push_back(index);
  kept_.push_back(keep);
  ++steps_;
  return bundle_.classifier.step(x, classifier_state_);
}

CostLedger OnlineSession::ledger() const { return episode_cost(kept_, charged_costs(bundle_, options_)); }

InferenceResult infer_online(const ModelBundle& bundle, const VideoSample& sample,
                             const InferenceOptions& options) {
  check_sample_shape(bundle, sample);
  OnlineSession session(bundle, options);
  InferenceResult r;
  r.probs.resize(bundle.config.num_classes, sample.frames);
  for (int t = 0; t < sample.frames; ++t) r.probs.col(t) = session.push(sample.frame(t));
  r.patches = session.patches();
  r.kept = session.kept();
  r.ledger = session.ledger();
  return r;
}

InferenceResult infer_offline(const ModelBundle& bundle, const VideoSample& sample,
                              const InferenceOptions& options) {
  check_sample_shape(bundle, sample);
  const double rho = resolve_rho(bundle, options);
  Rng rng(derive_seed(options.seed, "fixed_policy"));
  const auto glance = compute_glance(bundle, sample);
  const int T = sample.frames;

  InferenceResult r;
  auto hp = bundle.patch_policy.initial_state();
  nn::Matrix<float> hs;
  if (options.use_skip) hs = bundle.skip_policy->initial_state();
  for (int t = 0; t < T; ++t) {
    int index;
    if (options.policy == PolicyVariant::kLearned) {
      auto pr = policy_step(bundle.patch_policy, glance.maps[t], hp);
      hp = std::move(pr.state);
      index = select_patch(pr.dist, SelectMode::kArgmax, rng).index;
    } else {
      index = fixed_policy_choice(bundle.grid, options.policy, rng);
    }
    bool keep = true;
    if (options.use_skip) {
      auto sr = skip_step(*bundle.skip_policy, glance.maps[t], hs);
      hs = std::move(sr.state);
      keep = decide_skip(sr.p_keep, SkipMode::kThreshold, rho, rng).keep;
    }
    r.patches.push_back(index);
    r.kept.push_back(keep);
  }

  std::vector<PatchRequest> requests;
  std::vector<int> cols;
  for (int t = 0; t < T; ++t) {
    if (r.kept[t]) {
      cols.push_back(static_cast<int>(requests.size()));
      requests.push_back({t, bundle.grid.offsets[r.patches[t]]});
    } else {
      cols.push_back(-1);
    }
  }
  nn::Matrix<float> local;
  if (!requests.empty()) {
    if (options.parallel_focus) {
      local = focus_pooled(bundle, sample, requests);
    } else {
      local.resize(bundle.config.focus_channels(), static_cast<Eigen::Index>(requests.size()));
      for (std::size_t i = 0; i < requests.size(); ++i) {
        local.col(static_cast<Eigen::Index>(i)) = focus_pooled(bundle, sample, std::span(&requests[i], 1));
      }
    }
  }
  const auto x = sequence_inputs(bundle, glance.pooled, local, cols);
  const auto probs = bundle.classifier.forward_sequence(x, nullptr);
  r.probs = probs.col(probs.cols() - 1);
  r.ledger = episode_cost(r.kept, charged_costs(bundle, options));
  return r;
}

// ---- full chain ----

TrainedModels train_all(const TrainingPlan& plan, const DatasetSplit& train, std::uint64_t seed,
                        const EpochCallback& log) {
  auto bundle = ModelBundle::create(plan.bundle, seed);
  std::vector<StageReport> reports;
  if (!plan.skip_pretrain) {
    reports.push_back(run_stage(bundle, train, plan.pretrain, derive_seed(seed, "pretrain"), log));
  }
  reports.push_back(run_stage(bundle, train, plan.stage1, derive_seed(seed, "stage1"), log));
  ModelBundle snapshot = bundle;
  reports.push_back(run_stage(bundle, train, plan.stage2, derive_seed(seed, "stage2"), log));
  reports.push_back(run_stage(bundle, train, plan.stage3, derive_seed(seed, "stage3"), log));
  return {std::move(snapshot), std::move(bundle), std::move(reports)};
}

}  // namespace adafocus
