#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "adafocus/layers.hpp"

namespace adafocus::nn {

/// base * (1 + cos(pi * step / total)) / 2, reaching 0 at step == total.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Rescales all gradients so their joint L2 norm is at most max_norm
/// (no-op when max_norm <= 0). Returns the norm before clipping.
template <typename S>
double clip_grad_norm(const ParamList<S>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.value->squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (const auto& g : grads) *g.value *= scale;
  }
  return norm;
}

struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
  long total_steps = 0;  // cosine horizon; 0 disables annealing
};

namespace detail {
template <typename S>
void check_finite(const ParamList<S>& grads, long step) {
  for (const auto& g : grads) {
    if (!g.value->allFinite()) {
      throw TrainingError("non-finite gradient in '" + g.name + "' at step " +
                          std::to_string(step));
    }
  }
}

template <typename S>
void check_aligned(const ParamList<S>& params, const ParamList<S>& grads) {
  if (params.size() != grads.size()) throw ContractError("optimizer: param/grad count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value->rows() != grads[i].value->rows() ||
        params[i].value->cols() != grads[i].value->cols()) {
      throw ContractError("optimizer: shape mismatch for '" + params[i].name + "'");
    }
  }
}
}  // namespace detail

/// Momentum SGD (Nesterov by default) with L2 weight decay and cosine
/// annealing:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * (nesterov ? g + mu * v : v)
template <typename S>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg = {}) : cfg_(cfg) {}

  double current_lr() const { return cosine_lr(cfg_.learning_rate, step_, cfg_.total_steps); }

  void step(const ParamList<S>& params, const ParamList<S>& grads) {
    detail::check_aligned(params, grads);
    detail::check_finite(grads, step_);
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.push_back(Matrix<S>::Zero(p.value->rows(), p.value->cols()));
    }
    const S lr = static_cast<S>(current_lr());
    const S mu = static_cast<S>(cfg_.momentum);
    const S wd = static_cast<S>(cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix<S>& p = *params[i].value;
      const Matrix<S> g = *grads[i].value + wd * p;
      Matrix<S>& v = velocity_[i];
      v = mu * v + g;
      if (cfg_.nesterov) {
        p -= lr * (g + mu * v);
      } else {
        p -= lr * v;
      }
    }
    ++step_;
  }

  long step_count() const { return step_; }
  std::vector<Matrix<S>>& velocity() { return velocity_; }
  const SgdConfig& config() const { return cfg_; }
  void restore(long step, std::vector<Matrix<S>> velocity) {
    step_ = step;
    velocity_ = std::move(velocity);
  }

 private:
  SgdConfig cfg_;
  long step_ = 0;
  std::vector<Matrix<S>> velocity_;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename S>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const ParamList<S>& params, const ParamList<S>& grads) {
    detail::check_aligned(params, grads);
    detail::check_finite(grads, step_);
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Matrix<S>::Zero(p.value->rows(), p.value->cols()));
        v_.push_back(Matrix<S>::Zero(p.value->rows(), p.value->cols()));
      }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S alpha = static_cast<S>(cfg_.learning_rate * std::sqrt(c2) / c1);
    const S eps = static_cast<S>(cfg_.epsilon * std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix<S>& g = *grads[i].value;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseAbs2();
      params[i].value->array() -= alpha * m_[i].array() / (v_[i].array().sqrt() + eps);
    }
  }

  long step_count() const { return step_; }
  std::vector<Matrix<S>>& first_moment() { return m_; }
  std::vector<Matrix<S>>& second_moment() { return v_; }
  void restore(long step, std::vector<Matrix<S>> m, std::vector<Matrix<S>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::vector<Matrix<S>> m_, v_;
};

}  // namespace adafocus::nn
