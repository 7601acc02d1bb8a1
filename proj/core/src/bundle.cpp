#include "adafocus/bundle.hpp"

#include <json.hpp>

#include "adafocus/checkpoint.hpp"

namespace adafocus {

using json = nlohmann::json;

void BundleConfig::validate() const {
  if (channels < 1) throw ConfigError("bundle: channels must be >= 1");
  if (num_classes < 2) throw ConfigError("bundle: num_classes must be >= 2");
  if (patch_size < 1 || patch_size > frame_size) {
    throw ConfigError("bundle: patch_size must lie in [1, frame_size]");
  }
  if (grid_k < 1) throw ConfigError("bundle: grid_k must be >= 1");
  glance_spec.validate();
  focus_spec.validate();
  if (glance_spec.input_channels != channels || focus_spec.input_channels != channels) {
    throw ConfigError("bundle: backbone input channels disagree with data channels");
  }
  if (glance_extent() < grid_k) {
    throw ConfigError("bundle: glance map extent " + std::to_string(glance_extent()) +
                      " is smaller than the candidate grid (" + std::to_string(grid_k) + ")");
  }
  if (classifier_hidden < 1 || policy_channels < 1 || policy_hidden < 1) {
    throw ConfigError("bundle: hidden sizes must be >= 1");
  }
  if (adafocus_plus && !feature_reuse) {
    throw ConfigError(
        "bundle: the skip gate needs feature reuse; without glance features a "
        "skipped frame leaves the classifier with no input");
  }
}

int BundleConfig::classifier_input() const {
  return feature_reuse ? glance_channels() + focus_channels() : focus_channels();
}

PolicyShape BundleConfig::policy_shape(PolicyKind kind) const {
  PolicyShape s;
  s.feature_channels = glance_channels();
  s.feature_extent = glance_extent();
  s.compressed_channels = policy_channels;
  s.hidden_size = policy_hidden;
  s.num_actions = kind == PolicyKind::kPatch ? grid_k * grid_k : 1;
  return s;
}

std::string_view to_string(Component c) {
  switch (c) {
    case Component::kGlance: return "glance";
    case Component::kFocus: return "focus";
    case Component::kClassifier: return "classifier";
    case Component::kPatchPolicy: return "patch_policy";
    case Component::kSkipPolicy: return "skip_policy";
  }
  return "?";
}

ModelBundle ModelBundle::create(const BundleConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle b;
  b.config = config;
  b.seed = seed;
  b.glance = nn::ConvBackbone<float>(config.glance_spec, nn::FeatureSource::kGlance,
                                     config.frame_size);
  b.focus = nn::ConvBackbone<float>(config.focus_spec, nn::FeatureSource::kFocus,
                                    config.patch_size);
  b.classifier = nn::Classifier<float>(config.classifier_kind, config.classifier_input(),
                                       config.classifier_hidden, config.num_classes);
  b.patch_policy = PolicyNet<float>(PolicyKind::kPatch, config.policy_shape(PolicyKind::kPatch));
  if (config.adafocus_plus) {
    b.skip_policy = PolicyNet<float>(PolicyKind::kSkip, config.policy_shape(PolicyKind::kSkip));
  }
  b.grid = build_grid(config.frame_size, config.patch_size, config.grid_k);

  Rng glance_rng(derive_seed(seed, "glance"));
  Rng focus_rng(derive_seed(seed, "focus"));
  Rng classifier_rng(derive_seed(seed, "classifier"));
  Rng policy_rng(derive_seed(seed, "patch_policy"));
  b.glance.init(glance_rng);
  b.focus.init(focus_rng);
  b.classifier.init(classifier_rng);
  b.patch_policy.init(policy_rng);
  if (b.skip_policy) {
    Rng skip_rng(derive_seed(seed, "skip_policy"));
    b.skip_policy->init(skip_rng);
  }
  return b;
}

nn::ParamList<float> ModelBundle::params(Component c) {
  nn::ParamList<float> out;
  switch (c) {
    case Component::kGlance: glance.collect(out, "glance"); break;
    case Component::kFocus: focus.collect(out, "focus"); break;
    case Component::kClassifier: classifier.collect(out, "classifier"); break;
    case Component::kPatchPolicy: patch_policy.collect(out, "patch_policy"); break;
    case Component::kSkipPolicy:
      if (skip_policy) skip_policy->collect(out, "skip_policy");
      break;
  }
  return out;
}

std::uint64_t ModelBundle::hash(Component c) const {
  return nn::hash_params(const_cast<ModelBundle*>(this)->params(c));
}

ComponentCosts ModelBundle::costs() const {
  ComponentCosts c;
  c.glance = count_flops(config.glance_spec, config.frame_size);
  c.focus = count_flops(config.focus_spec, config.patch_size);
  c.patch_policy = count_flops(config.policy_shape(PolicyKind::kPatch));
  c.skip_policy = config.adafocus_plus ? count_flops(config.policy_shape(PolicyKind::kSkip)) : 0;
  c.classifier = classifier_flops(config.classifier_kind, config.classifier_input(),
                                  config.classifier_hidden, config.num_classes);
  return c;
}

// ---- checkpoint conversion ----

namespace {

json spec_to_json(const nn::ConvBackboneSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    layers.push_back({{"out_channels", l.out_channels},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"act", std::string(nn::to_string(l.act))}});
  }
  return {{"input_channels", spec.input_channels}, {"layers", layers}};
}

nn::ConvBackboneSpec spec_from_json(const json& j) {
  nn::ConvBackboneSpec spec;
  spec.input_channels = j.at("input_channels").get<int>();
  for (const auto& l : j.at("layers")) {
    spec.layers.push_back({l.at("out_channels").get<int>(), l.at("kernel").get<int>(),
                           l.at("stride").get<int>(),
                           nn::parse_nonlinearity(l.at("act").get<std::string>())});
  }
  return spec;
}

constexpr Component kAllComponents[] = {Component::kGlance, Component::kFocus,
                                        Component::kClassifier, Component::kPatchPolicy,
                                        Component::kSkipPolicy};

json config_to_json(const BundleConfig& c) {
  return {{"channels", c.channels},
          {"frame_size", c.frame_size},
          {"patch_size", c.patch_size},
          {"grid_k", c.grid_k},
          {"num_classes", c.num_classes},
          {"glance_spec", spec_to_json(c.glance_spec)},
          {"focus_spec", spec_to_json(c.focus_spec)},
          {"classifier_kind", std::string(nn::to_string(c.classifier_kind))},
          {"classifier_hidden", c.classifier_hidden},
          {"policy_channels", c.policy_channels},
          {"policy_hidden", c.policy_hidden},
          {"feature_reuse", c.feature_reuse},
          {"adafocus_plus", c.adafocus_plus}};
}

}  // namespace

std::string describe_config(const BundleConfig& config) { return config_to_json(config).dump(); }

Checkpoint to_checkpoint(const ModelBundle& bundle) {
  json meta = {
      {"format", "adafocus-bundle"},
      {"stage", bundle.stage},
      {"seed", bundle.seed},
      {"lineage", bundle.lineage},
      {"optimizer", bundle.optimizer_note},
      {"config", config_to_json(bundle.config)},
  };
  meta["rho"] = bundle.rho ? json(*bundle.rho) : json(nullptr);

  Checkpoint ckpt;
  ckpt.metadata = meta.dump(2);
  auto& mutable_bundle = const_cast<ModelBundle&>(bundle);
  for (Component comp : kAllComponents) {
    for (const auto& p : mutable_bundle.params(comp)) {
      NamedArray a;
      a.name = p.name;
      a.dims = {static_cast<std::uint64_t>(p.value->rows()),
                static_cast<std::uint64_t>(p.value->cols())};
      a.values.assign(p.value->data(), p.value->data() + p.value->size());
      ckpt.arrays.push_back(std::move(a));
    }
  }
  return ckpt;
}

ModelBundle from_checkpoint(const Checkpoint& ckpt) {
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  ModelBundle b;
  try {
    if (meta.at("format") != "adafocus-bundle") throw FormatError("checkpoint: not a model bundle");
    const auto& jc = meta.at("config");
    BundleConfig c;
    c.channels = jc.at("channels").get<int>();
    c.frame_size = jc.at("frame_size").get<int>();
    c.patch_size = jc.at("patch_size").get<int>();
    c.grid_k = jc.at("grid_k").get<int>();
    c.num_classes = jc.at("num_classes").get<int>();
    c.glance_spec = spec_from_json(jc.at("glance_spec"));
    c.focus_spec = spec_from_json(jc.at("focus_spec"));
    c.classifier_kind = nn::parse_classifier_kind(jc.at("classifier_kind").get<std::string>());
    c.classifier_hidden = jc.at("classifier_hidden").get<int>();
    c.policy_channels = jc.at("policy_channels").get<int>();
    c.policy_hidden = jc.at("policy_hidden").get<int>();
    c.feature_reuse = jc.at("feature_reuse").get<bool>();
    c.adafocus_plus = jc.at("adafocus_plus").get<bool>();
    b = ModelBundle::create(c, meta.at("seed").get<std::uint64_t>());
    b.stage = meta.at("stage").get<std::string>();
    b.lineage = meta.at("lineage").get<std::vector<std::string>>();
    b.optimizer_note = meta.value("optimizer", "");
    if (!meta.at("rho").is_null()) b.rho = meta.at("rho").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  for (Component comp : kAllComponents) {
    for (const auto& p : b.params(comp)) {
      const auto& a = ckpt.get(p.name);
      if (a.dims.size() != 2 || a.dims[0] != static_cast<std::uint64_t>(p.value->rows()) ||
          a.dims[1] != static_cast<std::uint64_t>(p.value->cols())) {
        throw FormatError("checkpoint: array '" + p.name + "' has the wrong shape");
      }
      std::copy(a.values.begin(), a.values.end(), p.value->data());
    }
  }
  return b;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(bundle), path);
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  return from_checkpoint(load_checkpoint(path));
}

// ---- shared feature helpers ----

void check_sample_shape(const ModelBundle& bundle, const VideoSample& sample) {
  const auto& c = bundle.config;
  if (sample.channels != c.channels || sample.height != c.frame_size ||
      sample.width != c.frame_size) {
    throw ContractError("sample is " + std::to_string(sample.channels) + "x" +
                        std::to_string(sample.height) + "x" + std::to_string(sample.width) +
                        ", bundle expects " + std::to_string(c.channels) + "x" +
                        std::to_string(c.frame_size) + "x" + std::to_string(c.frame_size));
  }
}

GlanceFeatures compute_glance(const ModelBundle& bundle, const VideoSample& sample) {
  check_sample_shape(bundle, sample);
  std::vector<std::span<const float>> frames;
  for (int t = 0; t < sample.frames; ++t) frames.push_back(sample.frame(t));
  const auto images = nn::pack_images<float>(frames, sample.channels, sample.height, sample.width);
  const auto fm = bundle.glance.forward(images, sample.frames, sample.height, sample.width, nullptr);
  GlanceFeatures g;
  for (int t = 0; t < sample.frames; ++t) g.maps.push_back(fm.image(t));
  g.pooled = nn::pool(fm);
  return g;
}

nn::Matrix<float> focus_pooled(const ModelBundle& bundle, const VideoSample& sample,
                               std::span<const PatchRequest> requests) {
  check_sample_shape(bundle, sample);
  const int P = bundle.config.patch_size;
  std::vector<std::vector<float>> patches;
  patches.reserve(requests.size());
  for (const auto& r : requests) {
    patches.push_back(crop(sample.frame(r.frame), sample.channels, sample.height,
                           sample.width, r.offset, P));
  }
  std::vector<std::span<const float>> views(patches.begin(), patches.end());
  const auto images = nn::pack_images<float>(views, sample.channels, P, P);
  const auto fm = bundle.focus.forward(images, static_cast<int>(requests.size()), P, P, nullptr);
  return nn::pool(fm);
}

nn::Matrix<float> classifier_input(const ModelBundle& bundle,
                                   const nn::Matrix<float>& glance_pooled_col,
                                   const nn::Matrix<float>* local) {
  const int gc = bundle.config.glance_channels();
  const int fc = bundle.config.focus_channels();
  if (!bundle.config.feature_reuse) {
    if (local == nullptr) {
      throw ConfigError("classifier input: skipped frame without feature reuse has no input");
    }
    return *local;
  }
  nn::Matrix<float> x(gc + fc, 1);
  x.topRows(gc) = glance_pooled_col;
  if (local != nullptr) {
    x.bottomRows(fc) = *local;
  } else {
    x.bottomRows(fc).setZero();
  }
  return x;
}

}  // namespace adafocus
