#include "adafocus/evalbench.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace adafocus {

using json = nlohmann::json;

std::string_view to_string(EvalMode mode) { return mode == EvalMode::kOnline ? "online" : "offline"; }

EvalMode parse_eval_mode(std::string_view name) {
  if (name == "online") return EvalMode::kOnline;
  if (name == "offline") return EvalMode::kOffline;
  throw ConfigError("unknown eval mode '" + std::string(name) + "'");
}

Scores score_predictions(std::span<const nn::Matrix<float>> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw ContractError("score_predictions: count mismatch");
  if (probs.empty()) throw ContractError("score_predictions: no predictions");
  Scores s;
  const auto T = probs.front().cols();
  bool uniform_length = true;
  for (const auto& p : probs) uniform_length = uniform_length && p.cols() == T;
  std::vector<long> correct(uniform_length ? static_cast<std::size_t>(T) : 0, 0);
  long last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    for (Eigen::Index t = 0; t < probs[i].cols(); ++t) {
      Eigen::Index arg = 0;
      probs[i].col(t).maxCoeff(&arg);
      const bool hit = arg == labels[i];
      if (uniform_length) correct[static_cast<std::size_t>(t)] += hit ? 1 : 0;
      if (t == probs[i].cols() - 1) last += hit ? 1 : 0;
    }
  }
  const double n = static_cast<double>(probs.size());
  s.top1 = static_cast<double>(last) / n;
  for (long c : correct) s.per_frame_accuracy.push_back(static_cast<double>(c) / n);
  return s;
}

namespace {

std::string options_hash(const ModelBundle& bundle, const EvalOptions& o) {
  std::ostringstream os;
  os << describe_config(bundle.config) << "|mode=" << to_string(o.mode)
     << "|policy=" << to_string(o.policy) << "|skip=" << o.use_skip;
  if (o.rho) os << "|rho=" << *o.rho;
  if (bundle.rho) os << "|bundle_rho=" << *bundle.rho;
  return hex64(fnv1a(os.str()));
}

}  // namespace

MetricsRecord evaluate(const ModelBundle& bundle, const DatasetSplit& split,
                       const EvalOptions& options) {
  if (split.samples.empty()) throw ContractError("evaluate: empty split");
  InferenceOptions io;
  io.policy = options.policy;
  io.use_skip = options.use_skip;
  io.rho = options.rho;

  std::vector<nn::Matrix<float>> probs;
  std::vector<int> labels;
  MetricsRecord r;
  long kept = 0, frames = 0;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    io.seed = derive_seed(options.seed, static_cast<std::uint64_t>(i));
    auto res = options.mode == EvalMode::kOnline ? infer_online(bundle, s, io)
                                                 : infer_offline(bundle, s, io);
    const auto& l = res.ledger;
    r.mean_flops += static_cast<double>(l.total());
    r.mean_glance += static_cast<double>(l.glance);
    r.mean_focus += static_cast<double>(l.focus);
    r.mean_patch_policy += static_cast<double>(l.patch_policy);
    r.mean_skip_policy += static_cast<double>(l.skip_policy);
    r.mean_classifier += static_cast<double>(l.classifier);
    for (bool k : res.kept) {
      kept += k ? 1 : 0;
      ++frames;
    }
    probs.push_back(std::move(res.probs));
    labels.push_back(s.label);
  }
  const auto scores = score_predictions(probs, labels);
  const double n = static_cast<double>(split.samples.size());
  r.label = options.label;
  r.policy = std::string(to_string(options.policy));
  r.mode = std::string(to_string(options.mode));
  r.patch_size = bundle.config.patch_size;
  r.eta = options.eta;
  r.num_samples = static_cast<int>(split.samples.size());
  r.top1 = scores.top1;
  if (options.mode == EvalMode::kOnline) r.per_frame_accuracy = scores.per_frame_accuracy;
  r.mean_flops /= n;
  r.mean_glance /= n;
  r.mean_focus /= n;
  r.mean_patch_policy /= n;
  r.mean_skip_policy /= n;
  r.mean_classifier /= n;
  if (options.use_skip) r.keep_rate = static_cast<double>(kept) / static_cast<double>(frames);
  r.seed = options.seed;
  r.config_hash = options_hash(bundle, options);
  return r;
}

std::vector<MetricsRecord> ablate_policies(const ModelBundle& learned_model,
                                           const ModelBundle& fixed_model,
                                           const DatasetSplit& split, std::uint64_t seed) {
  if (!(learned_model.config == fixed_model.config)) {
    throw ContractError("ablate_policies: models have different configs");
  }
  if (learned_model.hash(Component::kGlance) != fixed_model.hash(Component::kGlance)) {
    throw ContractError("ablate_policies: models have different glance networks");
  }
  std::vector<MetricsRecord> out;
  for (auto v : {PolicyVariant::kLearned, PolicyVariant::kRandom, PolicyVariant::kCentral,
                 PolicyVariant::kGaussian}) {
    EvalOptions o;
    o.policy = v;
    o.seed = seed;
    o.label = "policy:" + std::string(to_string(v));
    out.push_back(evaluate(v == PolicyVariant::kLearned ? learned_model : fixed_model, split, o));
  }
  return out;
}

std::pair<MetricsRecord, MetricsRecord> ablate_feature_reuse(const ModelBundle& reuse_on,
                                                             const ModelBundle& reuse_off,
                                                             const DatasetSplit& split,
                                                             std::uint64_t seed) {
  auto a = reuse_on.config, b = reuse_off.config;
  if (!a.feature_reuse || b.feature_reuse) {
    throw ContractError("ablate_feature_reuse: expected one reuse-on and one reuse-off bundle");
  }
  b.feature_reuse = true;
  if (!(a == b)) throw ContractError("ablate_feature_reuse: bundles differ beyond feature_reuse");
  EvalOptions o;
  o.seed = seed;
  o.label = "reuse:on";
  auto on = evaluate(reuse_on, split, o);
  o.label = "reuse:off";
  auto off = evaluate(reuse_off, split, o);
  return {std::move(on), std::move(off)};
}

std::vector<MetricsRecord> tradeoff_sweep(std::vector<ModelBundle>& bundles,
                                          const DatasetSplit& calibration,
                                          const DatasetSplit& split, std::span<const double> etas,
                                          std::uint64_t seed) {
  std::vector<MetricsRecord> out;
  for (auto& b : bundles) {
    EvalOptions o;
    o.seed = seed;
    if (!b.skip_policy) {
      o.label = "P=" + std::to_string(b.config.patch_size);
      out.push_back(evaluate(b, split, o));
      continue;
    }
    for (double eta : etas) {
      o.use_skip = true;
      o.eta = eta;
      if (eta >= 1.0) {
        o.rho = 0.0;
      } else {
        o.rho = calibrate(b, calibration, eta).rho;
      }
      std::ostringstream label;
      label << "P=" << b.config.patch_size << " eta=" << eta;
      o.label = label.str();
      out.push_back(evaluate(b, split, o));
    }
  }
  return out;
}

double glyph_overlap(PatchOffset patch, int patch_size, GlyphPos glyph, int glyph_size) {
  const int y0 = std::max(patch.y, glyph.y), y1 = std::min(patch.y + patch_size, glyph.y + glyph_size);
  const int x0 = std::max(patch.x, glyph.x), x1 = std::min(patch.x + patch_size, glyph.x + glyph_size);
  if (y1 <= y0 || x1 <= x0) return 0.0;
  return static_cast<double>((y1 - y0) * (x1 - x0)) / static_cast<double>(glyph_size * glyph_size);
}

std::vector<SelectionRecord> export_selections(const ModelBundle& bundle, const DatasetSplit& split,
                                               PolicyVariant policy, std::uint64_t seed) {
  std::vector<SelectionRecord> out;
  InferenceOptions io;
  io.policy = policy;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    io.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    const auto res = infer_online(bundle, s, io);
    for (int t = 0; t < s.frames; ++t) {
      SelectionRecord r;
      r.sample = static_cast<int>(i);
      r.frame = t;
      r.candidate = res.patches[t];
      r.offset = bundle.grid.offsets[r.candidate];
      r.glyph = s.glyph_track[t];
      r.kept = res.kept[t];
      r.overlap = glyph_overlap(r.offset, bundle.config.patch_size, r.glyph, split.config.glyph_size);
      out.push_back(r);
    }
  }
  return out;
}

double overlap_rate(std::span<const SelectionRecord> records) {
  if (records.empty()) throw ContractError("overlap_rate: no records");
  double sum = 0.0;
  for (const auto& r : records) sum += r.overlap;
  return sum / static_cast<double>(records.size());
}

std::string metrics_to_json(std::span<const MetricsRecord> records) {
  json arr = json::array();
  for (const auto& r : records) {
    json j = {{"label", r.label},
              {"policy", r.policy},
              {"mode", r.mode},
              {"patch_size", r.patch_size},
              {"num_samples", r.num_samples},
              {"top1", r.top1},
              {"mean_flops", r.mean_flops},
              {"ledger",
               {{"glance", r.mean_glance},
                {"focus", r.mean_focus},
                {"patch_policy", r.mean_patch_policy},
                {"skip_policy", r.mean_skip_policy},
                {"classifier", r.mean_classifier}}},
              {"per_frame_accuracy", r.per_frame_accuracy},
              {"seed", r.seed},
              {"config_hash", r.config_hash}};
    j["eta"] = r.eta ? json(*r.eta) : json(nullptr);
    j["keep_rate"] = r.keep_rate ? json(*r.keep_rate) : json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr.dump(2) + "\n";
}

std::vector<MetricsRecord> metrics_from_json(const std::string& text) {
  std::vector<MetricsRecord> out;
  try {
    const auto arr = json::parse(text);
    if (!arr.is_array()) throw FormatError("metrics: expected a JSON array");
    for (const auto& j : arr) {
      MetricsRecord r;
      r.label = j.at("label").get<std::string>();
      r.policy = j.at("policy").get<std::string>();
      r.mode = j.at("mode").get<std::string>();
      r.patch_size = j.at("patch_size").get<int>();
      r.num_samples = j.at("num_samples").get<int>();
      r.top1 = j.at("top1").get<double>();
      r.mean_flops = j.at("mean_flops").get<double>();
      const auto& l = j.at("ledger");
      r.mean_glance = l.at("glance").get<double>();
      r.mean_focus = l.at("focus").get<double>();
      r.mean_patch_policy = l.at("patch_policy").get<double>();
      r.mean_skip_policy = l.at("skip_policy").get<double>();
      r.mean_classifier = l.at("classifier").get<double>();
      r.per_frame_accuracy = j.at("per_frame_accuracy").get<std::vector<double>>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.config_hash = j.at("config_hash").get<std::string>();
      if (!j.at("eta").is_null()) r.eta = j.at("eta").get<double>();
      if (!j.at("keep_rate").is_null()) r.keep_rate = j.at("keep_rate").get<double>();
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("metrics: ") + e.what());
  }
  return out;
}

std::string metrics_to_csv(std::span<const MetricsRecord> records) {
  std::ostringstream os;
  os.precision(10);
  os << "label,policy,mode,patch_size,eta,num_samples,top1,mean_flops,mean_focus,keep_rate,seed,"
        "config_hash\n";
  for (const auto& r : records) {
    os << r.label << ',' << r.policy << ',' << r.mode << ',' << r.patch_size << ',';
    if (r.eta) os << *r.eta;
    os << ',' << r.num_samples << ',' << r.top1 << ',' << r.mean_flops << ',' << r.mean_focus << ',';
    if (r.keep_rate) os << *r.keep_rate;
    os << ',' << r.seed << ',' << r.config_hash << '\n';
  }
  return os.str();
}

std::string selections_to_csv(std::span<const SelectionRecord> records) {
  std::ostringstream os;
  os.precision(10);
  os << "sample,frame,candidate,patch_y,patch_x,glyph_y,glyph_x,kept,overlap\n";
  for (const auto& r : records) {
    os << r.sample << ',' << r.frame << ',' << r.candidate << ',' << r.offset.y << ',' << r.offset.x
       << ',' << r.glyph.y << ',' << r.glyph.x << ',' << (r.kept ? 1 : 0) << ',' << r.overlap << '\n';
  }
  return os.str();
}

}  // namespace adafocus
