#include "adafocus/focuspolicy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace adafocus {

PatchGrid build_grid(int frame_size, int patch_size, int grid_k) {
  if (patch_size < 1 || frame_size < 1) throw ConfigError("grid: sizes must be >= 1");
  if (patch_size > frame_size) {
    throw ConfigError("grid: patch size " + std::to_string(patch_size) +
                      " exceeds frame size " + std::to_string(frame_size));
  }
  if (grid_k < 1) throw ConfigError("grid: grid_k must be >= 1");
  PatchGrid g;
  g.grid_k = grid_k;
  g.patch_size = patch_size;
  g.frame_size = frame_size;
  g.degenerate = patch_size == frame_size;
  const int span = frame_size - patch_size;
  std::vector<int> axis(grid_k);
  for (int i = 0; i < grid_k; ++i) {
    axis[i] = grid_k == 1 ? span / 2 : i * span / (grid_k - 1);
  }
  for (int iy = 0; iy < grid_k; ++iy) {
    for (int ix = 0; ix < grid_k; ++ix) g.offsets.push_back({axis[iy], axis[ix]});
  }
  return g;
}

int PatchGrid::nearest(double cy, double cx) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const double half = patch_size / 2.0;
  for (int i = 0; i < size(); ++i) {
    const double dy = offsets[i].y + half - cy;
    const double dx = offsets[i].x + half - cx;
    const double d = dy * dy + dx * dx;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

int PatchGrid::central() const { return nearest(frame_size / 2.0, frame_size / 2.0); }

std::vector<float> crop(std::span<const float> frame, int channels, int height,
                        int width, PatchOffset offset, int patch) {
  if (static_cast<std::size_t>(channels) * height * width != frame.size()) {
    throw ContractError("crop: frame size mismatch");
  }
  if (patch < 1 || patch > height || patch > width) throw ContractError("crop: invalid patch size");
  if (offset.y < 0 || offset.x < 0 || offset.y > height - patch || offset.x > width - patch) {
    throw ContractError("crop: offset (" + std::to_string(offset.y) + ", " +
                        std::to_string(offset.x) + ") places the patch outside the frame");
  }
  std::vector<float> out(static_cast<std::size_t>(channels) * patch * patch);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < patch; ++y) {
      const float* src = frame.data() + (static_cast<std::size_t>(c) * height + offset.y + y) * width + offset.x;
      std::copy(src, src + patch, out.begin() + (static_cast<std::size_t>(c) * patch + y) * patch);
    }
  }
  return out;
}

PatchAction select_patch(std::span<const double> dist, SelectMode mode, Rng& rng) {
  if (dist.empty()) throw ContractError("select_patch: empty distribution");
  int index = 0;
  if (mode == SelectMode::kArgmax) {
    index = static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  } else {
    const double u = rng.uniform();
    double cum = 0.0;
    index = -1;
    for (std::size_t i = 0; i < dist.size(); ++i) {
      cum += dist[i];
      if (u < cum) {
        index = static_cast<int>(i);
        break;
      }
    }
    if (index < 0) {
      // Rounding left u above the total mass; take the last supported entry.
      for (std::size_t i = dist.size(); i-- > 0;) {
        if (dist[i] > 0.0) {
          index = static_cast<int>(i);
          break;
        }
      }
    }
  }
  return {index, std::log(dist[index])};
}

SkipDecision decide_skip(double p_keep, SkipMode mode, double rho, Rng& rng) {
  if (!(p_keep > 0.0 && p_keep < 1.0)) throw ContractError("decide_skip: p_keep must lie in (0, 1)");
  SkipDecision d;
  d.p_keep = p_keep;
  if (mode == SkipMode::kThreshold) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("decide_skip: rho must lie in [0, 1]");
    d.keep = p_keep >= rho;
  } else {
    d.keep = rng.uniform() < p_keep;
  }
  d.log_prob = d.keep ? std::log(p_keep) : std::log1p(-p_keep);
  return d;
}

// ---- PolicyNet ----

template <typename S>
PolicyNet<S>::PolicyNet(PolicyKind kind, PolicyShape shape) : kind_(kind), shape_(shape) {
  if (kind == PolicyKind::kSkip) shape_.num_actions = 1;
  if (shape_.num_actions < 1) throw ConfigError("policy: num_actions must be >= 1");
  const int flat = shape_.compressed_channels * shape_.feature_extent * shape_.feature_extent;
  compressor = nn::Conv2d<S>(shape_.feature_channels, shape_.compressed_channels, 1, 1,
                             nn::Nonlinearity::kRelu);
  cell = nn::GruCell<S>(flat, shape_.hidden_size);
  head = nn::Linear<S>(shape_.hidden_size, shape_.num_actions);
  value_head = nn::Linear<S>(shape_.hidden_size, 1);
}

template <typename S>
void PolicyNet<S>::init(Rng& rng) {
  compressor.init(rng);
  cell.init(rng);
  head.init(rng, 0.1);
  value_head.init(rng, 1.0);
}

template <typename S>
nn::Matrix<S> PolicyNet<S>::initial_state() const {
  return nn::Matrix<S>::Zero(shape_.hidden_size, 1);
}

template <typename S>
typename PolicyNet<S>::StepOutput PolicyNet<S>::step(const nn::Matrix<S>& features,
                                                     const nn::Matrix<S>& hidden,
                                                     StepCache* cache) const {
  const int e = shape_.feature_extent;
  if (features.rows() != shape_.feature_channels || features.cols() != e * e) {
    throw ContractError("policy: glance map is " + std::to_string(features.rows()) + "x" +
                        std::to_string(features.cols()) + ", expected " +
                        std::to_string(shape_.feature_channels) + "x" + std::to_string(e * e));
  }
  nn::Matrix<S> compressed = compressor.forward(features, 1, e, e, cache ? &cache->compress : nullptr);
  // Row-major [channels x e^2] flattens channel by channel.
  const nn::Matrix<S> flat =
      Eigen::Map<const nn::Matrix<S>>(compressed.data(), compressed.size(), 1);
  StepOutput out;
  out.hidden = cell.forward(flat, hidden, cache ? &cache->gru : nullptr);
  out.logits = head.forward(out.hidden);
  out.value = value_head.forward(out.hidden)(0, 0);
  if (cache) cache->hidden = out.hidden;
  return out;
}

template <typename S>
nn::Matrix<S> PolicyNet<S>::backward_step(const StepCache& cache,
                                          const nn::Matrix<S>& dlogits, S dvalue,
                                          const nn::Matrix<S>& dh_next,
                                          PolicyNet& grad) const {
  nn::Matrix<S> dv(1, 1);
  dv(0, 0) = dvalue;
  nn::Matrix<S> dh = head.backward(cache.hidden, dlogits, grad.head, true);
  dh += value_head.backward(cache.hidden, dv, grad.value_head, true);
  dh += dh_next;
  auto [dflat, dh_prev] = cell.backward(cache.gru, dh, grad.cell, true);
  const int e = shape_.feature_extent;
  const nn::Matrix<S> dcompressed =
      Eigen::Map<const nn::Matrix<S>>(dflat.data(), shape_.compressed_channels, e * e);
  compressor.backward(cache.compress, dcompressed, grad.compressor, false);
  return dh_prev;
}

template <typename S>
void PolicyNet<S>::collect(nn::ParamList<S>& out, const std::string& prefix) {
  compressor.collect(out, prefix + ".compress");
  cell.collect(out, prefix + ".gru");
  head.collect(out, prefix + ".head");
  value_head.collect(out, prefix + ".value");
}

template class PolicyNet<float>;
template class PolicyNet<double>;

PolicyStepResult policy_step(const PolicyNet<float>& policy,
                             const nn::Matrix<float>& features,
                             const nn::Matrix<float>& state) {
  if (policy.kind() != PolicyKind::kPatch) throw ContractError("policy_step: not a patch policy");
  auto out = policy.step(features, state, nullptr);
  PolicyStepResult r;
  const Eigen::Index K = out.logits.rows();
  const double m = out.logits.maxCoeff();
  r.dist.resize(K);
  double total = 0.0;
  for (Eigen::Index i = 0; i < K; ++i) {
    r.dist[i] = std::exp(static_cast<double>(out.logits(i, 0)) - m);
    total += r.dist[i];
  }
  for (auto& p : r.dist) p /= total;
  r.value = out.value;
  r.state = std::move(out.hidden);
  return r;
}

SkipStepResult skip_step(const PolicyNet<float>& policy,
                         const nn::Matrix<float>& features,
                         const nn::Matrix<float>& state) {
  if (policy.kind() != PolicyKind::kSkip) throw ContractError("skip_step: not a skip policy");
  auto out = policy.step(features, state, nullptr);
  SkipStepResult r;
  const double z = out.logits(0, 0);
  constexpr double kEdge = 1e-9;
  r.p_keep = std::clamp(1.0 / (1.0 + std::exp(-z)), kEdge, 1.0 - kEdge);
  r.value = out.value;
  r.state = std::move(out.hidden);
  return r;
}

}  // namespace adafocus
