#pragma once

#include <optional>
#include <span>
#include <vector>

#include "adafocus/nets.hpp"

namespace adafocus {

/// Top-left pixel offset of a patch, row then column.
struct PatchOffset {
  int y = 0;
  int x = 0;
  bool operator==(const PatchOffset&) const = default;
};

/// K = grid_k^2 candidate offsets, row-major, uniformly spaced per axis
/// from 0 to H - P inclusive.
struct PatchGrid {
  int grid_k = 1;
  int patch_size = 0;
  int frame_size = 0;
  std::vector<PatchOffset> offsets;
  bool degenerate = false;  // P == H: every candidate is the full frame

  int size() const { return static_cast<int>(offsets.size()); }
  /// Candidate whose patch center is nearest to (cy, cx); lowest index on ties.
  int nearest(double cy, double cx) const;
  /// Candidate nearest to the frame center.
  int central() const;
};

PatchGrid build_grid(int frame_size, int patch_size, int grid_k);

/// Exact pixel copy of the [C x P x P] patch at `offset`.
std::vector<float> crop(std::span<const float> frame, int channels, int height,
                        int width, PatchOffset offset, int patch);

struct PatchAction {
  int index = 0;
  double log_prob = 0.0;
};

struct SkipDecision {
  bool keep = true;
  double p_keep = 0.5;
  double log_prob = 0.0;
};

enum class SelectMode { kSample, kArgmax };

/// Sample mode draws by inverse CDF; argmax breaks ties by lowest index.
PatchAction select_patch(std::span<const double> dist, SelectMode mode, Rng& rng);

enum class SkipMode { kSample, kThreshold };

/// Threshold mode keeps iff p_keep >= rho.
SkipDecision decide_skip(double p_keep, SkipMode mode, double rho, Rng& rng);

enum class PolicyKind { kPatch, kSkip };

struct PolicyShape {
  int feature_channels = 16;
  int feature_extent = 8;  // glance map is extent x extent
  int compressed_channels = 8;
  int hidden_size = 64;
  int num_actions = 25;  // K for the patch policy, 1 for the skip policy

  bool operator==(const PolicyShape&) const = default;
};

/// 1x1 channel compressor -> flatten -> GRU -> action head and value head.
/// The patch policy's head emits K logits; the skip policy's head emits one
/// logit whose sigmoid is the keep probability.
template <typename S>
class PolicyNet {
 public:
  struct StepCache {
    typename nn::Conv2d<S>::Cache compress;
    typename nn::GruCell<S>::Cache gru;
    nn::Matrix<S> hidden;  // GRU output
  };

  struct StepOutput {
    nn::Matrix<S> logits;  // [A x 1]
    S value = 0;
    nn::Matrix<S> hidden;  // next state
  };

  PolicyNet() = default;
  PolicyNet(PolicyKind kind, PolicyShape shape);

  void init(Rng& rng);
  nn::Matrix<S> initial_state() const;
  /// `features` is one unpooled glance map, [channels x extent^2].
  StepOutput step(const nn::Matrix<S>& features, const nn::Matrix<S>& hidden,
                  StepCache* cache) const;
  /// Backpropagates dL/dlogits, dL/dvalue and dL/dh_next through one step;
  /// returns dL/dh_prev.
  nn::Matrix<S> backward_step(const StepCache& cache, const nn::Matrix<S>& dlogits,
                              S dvalue, const nn::Matrix<S>& dh_next,
                              PolicyNet& grad) const;
  void collect(nn::ParamList<S>& out, const std::string& prefix);

  PolicyKind kind() const { return kind_; }
  const PolicyShape& shape() const { return shape_; }

  nn::Conv2d<S> compressor;
  nn::GruCell<S> cell;
  nn::Linear<S> head;
  nn::Linear<S> value_head;

 private:
  PolicyKind kind_ = PolicyKind::kPatch;
  PolicyShape shape_;
};

/// Categorical distribution over K candidates plus the critic's value.
struct PolicyStepResult {
  std::vector<double> dist;
  double value = 0.0;
  nn::Matrix<float> state;
};

struct SkipStepResult {
  double p_keep = 0.5;
  double value = 0.0;
  nn::Matrix<float> state;
};

PolicyStepResult policy_step(const PolicyNet<float>& policy,
                             const nn::Matrix<float>& features,
                             const nn::Matrix<float>& state);
/// The skip policy's state advances every frame, whatever decision follows.
SkipStepResult skip_step(const PolicyNet<float>& policy,
                         const nn::Matrix<float>& features,
                         const nn::Matrix<float>& state);

extern template class PolicyNet<float>;
extern template class PolicyNet<double>;

}  // namespace adafocus
