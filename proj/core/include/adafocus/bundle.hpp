#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adafocus/checkpoint.hpp"
#include "adafocus/costmodel.hpp"
#include "adafocus/focuspolicy.hpp"
#include "adafocus/nets.hpp"
#include "adafocus/synthdata.hpp"

namespace adafocus {

struct BundleConfig {
  int channels = 1;
  int frame_size = 64;
  int patch_size = 16;
  int grid_k = 5;
  int num_classes = 10;
  nn::ConvBackboneSpec glance_spec = nn::ConvBackboneSpec::default_glance(1);
  nn::ConvBackboneSpec focus_spec = nn::ConvBackboneSpec::default_focus(1);
  nn::ClassifierKind classifier_kind = nn::ClassifierKind::kRecurrent;
  int classifier_hidden = 64;
  int policy_channels = 8;
  int policy_hidden = 64;
  bool feature_reuse = true;   // classifier sees [pooled glance, pooled focus]
  bool adafocus_plus = false;  // adds the skip gate

  void validate() const;
  int glance_channels() const { return glance_spec.output_channels(); }
  int focus_channels() const { return focus_spec.output_channels(); }
  int glance_extent() const { return glance_spec.output_extent(frame_size); }
  int classifier_input() const;
  PolicyShape policy_shape(PolicyKind kind) const;
  bool operator==(const BundleConfig&) const = default;
};

/// Canonical one-line JSON of the config, used for hashing.
std::string describe_config(const BundleConfig& config);

enum class Component { kGlance, kFocus, kClassifier, kPatchPolicy, kSkipPolicy };
std::string_view to_string(Component c);

/// The glance network, focus network, classifier, patch policy and the
/// optional skip gate, with the candidate grid they share.
class ModelBundle {
 public:
  static ModelBundle create(const BundleConfig& config, std::uint64_t seed);

  BundleConfig config;
  nn::ConvBackbone<float> glance;
  nn::ConvBackbone<float> focus;
  nn::Classifier<float> classifier;
  PolicyNet<float> patch_policy;
  std::optional<PolicyNet<float>> skip_policy;
  PatchGrid grid;
  std::optional<double> rho;  // calibrated skip threshold
  std::string stage = "init";
  std::uint64_t seed = 0;
  std::vector<std::string> lineage;
  std::string optimizer_note;  // last stage's optimizer summary

  nn::ParamList<float> params(Component c);
  std::uint64_t hash(Component c) const;
  ComponentCosts costs() const;
};

/// Checkpoint arrays are "<component>.<layer>.<tensor>"; metadata is JSON
/// holding the config, stage tag, seed, rho and lineage.
Checkpoint to_checkpoint(const ModelBundle& bundle);
ModelBundle from_checkpoint(const Checkpoint& ckpt);
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

/// Unpooled glance maps per frame ([c x e^2] each) and pooled [c x T].
struct GlanceFeatures {
  std::vector<nn::Matrix<float>> maps;
  nn::Matrix<float> pooled;
};

GlanceFeatures compute_glance(const ModelBundle& bundle, const VideoSample& sample);

struct PatchRequest {
  int frame = 0;
  PatchOffset offset;
};

/// Pooled focus features for each requested patch, [focus channels x n],
/// computed as one batched forward pass.
nn::Matrix<float> focus_pooled(const ModelBundle& bundle, const VideoSample& sample,
                               std::span<const PatchRequest> requests);

/// Classifier input column for one frame. `local` may be null, meaning the
/// frame was skipped and an all-zero local vector is used.
nn::Matrix<float> classifier_input(const ModelBundle& bundle,
                                   const nn::Matrix<float>& glance_pooled_col,
                                   const nn::Matrix<float>* local);

void check_sample_shape(const ModelBundle& bundle, const VideoSample& sample);

}  // namespace adafocus
