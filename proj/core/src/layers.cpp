#include "adafocus/layers.hpp"

#include <cmath>

namespace adafocus::nn {

std::string_view to_string(Nonlinearity act) {
  switch (act) {
    case Nonlinearity::kIdentity: return "identity";
    case Nonlinearity::kRelu: return "relu";
    case Nonlinearity::kTanh: return "tanh";
  }
  return "?";
}

Nonlinearity parse_nonlinearity(std::string_view name) {
  if (name == "identity") return Nonlinearity::kIdentity;
  if (name == "relu") return Nonlinearity::kRelu;
  if (name == "tanh") return Nonlinearity::kTanh;
  throw ConfigError("unknown nonlinearity '" + std::string(name) + "'");
}

int conv_out_extent(int in, int kernel, int stride) {
  const int pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

template <typename S>
void apply_activation(Matrix<S>& m, Nonlinearity act) {
  switch (act) {
    case Nonlinearity::kIdentity: break;
    case Nonlinearity::kRelu: m = m.cwiseMax(S(0)); break;
    case Nonlinearity::kTanh: m = m.array().tanh().matrix(); break;
  }
}

template <typename S>
Matrix<S> activation_backward(const Matrix<S>& out, const Matrix<S>& dy,
                              Nonlinearity act) {
  switch (act) {
    case Nonlinearity::kIdentity: return dy;
    case Nonlinearity::kRelu:
      return (out.array() > S(0)).select(dy.array(), S(0)).matrix();
    case Nonlinearity::kTanh:
      return (dy.array() * (S(1) - out.array().square())).matrix();
  }
  return dy;
}

template <typename S>
void fill_normal(Matrix<S>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<S>(stddev * rng.normal());
  }
}

template <typename S>
void fill_uniform(Matrix<S>& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  }
}

}  // namespace

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}
template float sigmoid<float>(float);
template double sigmoid<double>(double);

// ---- Conv2d ----

template <typename S>
Conv2d<S>::Conv2d(int in_channels, int out_channels, int kernel, int stride,
                  Nonlinearity act)
    : weight(Matrix<S>::Zero(out_channels, in_channels * kernel * kernel)),
      bias(Matrix<S>::Zero(out_channels, 1)),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      act_(act) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || kernel % 2 == 0 ||
      stride < 1) {
    throw ConfigError("conv layer: channels >= 1, odd kernel and stride >= 1 required");
  }
}

template <typename S>
void Conv2d<S>::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_channels_) * kernel_ * kernel_;
  const double gain = act_ == Nonlinearity::kRelu ? 2.0 : 1.0;
  fill_normal(weight, rng, std::sqrt(gain / fan_in));
  bias.setZero();
}

template <typename S>
Matrix<S> Conv2d<S>::forward(const Matrix<S>& x, int count, int h, int w,
                             Cache* cache) const {
  if (x.rows() != in_channels_ || x.cols() != static_cast<Eigen::Index>(count) * h * w) {
    throw ContractError("conv forward: input shape mismatch");
  }
  const int k = kernel_, s = stride_, pad = k / 2;
  const int oh = conv_out_extent(h, k, s), ow = conv_out_extent(w, k, s);
  const Eigen::Index in_plane = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(oh) * ow;

  Matrix<S> cols;
  if (k == 1 && s == 1) {
    cols = x;
  } else {
    cols.setZero(static_cast<Eigen::Index>(in_channels_) * k * k, count * out_plane);
    for (int c = 0; c < in_channels_; ++c) {
      const S* src_c = x.row(c).data();
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          S* dst = cols.row((c * k + ky) * k + kx).data();
          for (int n = 0; n < count; ++n) {
            const S* src = src_c + n * in_plane;
            S* d = dst + n * out_plane;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * s - pad + kx;
                if (ix < 0 || ix >= w) continue;
                d[oy * ow + ox] = src[iy * w + ix];
              }
            }
          }
        }
      }
    }
  }
  // One product per image: GEMM blocking depends on the column count, and
  // batched and single-image passes must agree bit for bit.
  Matrix<S> out(out_channels_, count * out_plane);
  for (int n = 0; n < count; ++n) {
    out.middleCols(n * out_plane, out_plane).noalias() = weight * cols.middleCols(n * out_plane, out_plane);
  }
  out.colwise() += bias.col(0);
  apply_activation(out, act_);
  if (cache != nullptr) {
    cache->cols = std::move(cols);
    cache->out = out;
    cache->count = count;
    cache->in_h = h;
    cache->in_w = w;
    cache->out_h = oh;
    cache->out_w = ow;
  }
  return out;
}

template <typename S>
Matrix<S> Conv2d<S>::backward(const Cache& cache, const Matrix<S>& dy,
                              Conv2d& grad, bool need_dx) const {
  const Matrix<S> dpre = activation_backward(cache.out, dy, act_);
  grad.weight.noalias() += dpre * cache.cols.transpose();
  grad.bias.col(0) += dpre.rowwise().sum();
  if (!need_dx) return {};

  const Matrix<S> dcols = weight.transpose() * dpre;
  const int k = kernel_, s = stride_, pad = k / 2;
  const int h = cache.in_h, w = cache.in_w, oh = cache.out_h, ow = cache.out_w;
  if (k == 1 && s == 1) return dcols;
  const Eigen::Index in_plane = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(oh) * ow;
  Matrix<S> dx = Matrix<S>::Zero(in_channels_, cache.count * in_plane);
  for (int c = 0; c < in_channels_; ++c) {
    S* dst_c = dx.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = dcols.row((c * k + ky) * k + kx).data();
        for (int n = 0; n < cache.count; ++n) {
          S* d = dst_c + n * in_plane;
          const S* sn = src + n * out_plane;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s - pad + kx;
              if (ix < 0 || ix >= w) continue;
              d[iy * w + ix] += sn[oy * ow + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

template <typename S>
void Conv2d<S>::collect(ParamList<S>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

// ---- Linear ----

template <typename S>
Linear<S>::Linear(int in, int out)
    : weight(Matrix<S>::Zero(out, in)), bias(Matrix<S>::Zero(out, 1)) {
  if (in < 1 || out < 1) throw ConfigError("linear layer: sizes must be >= 1");
}

template <typename S>
void Linear<S>::init(Rng& rng, double scale) {
  fill_uniform(weight, rng, scale / std::sqrt(static_cast<double>(weight.cols())));
  bias.setZero();
}

template <typename S>
Matrix<S> Linear<S>::forward(const Matrix<S>& x) const {
  if (x.rows() != weight.cols()) throw ContractError("linear forward: input size mismatch");
  Matrix<S> y = weight * x;
  y.colwise() += bias.col(0);
  return y;
}

template <typename S>
Matrix<S> Linear<S>::backward(const Matrix<S>& x, const Matrix<S>& dy,
                              Linear& grad, bool need_dx) const {
  grad.weight.noalias() += dy * x.transpose();
  grad.bias.col(0) += dy.rowwise().sum();
  if (!need_dx) return {};
  return weight.transpose() * dy;
}

template <typename S>
void Linear<S>::collect(ParamList<S>& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

// ---- GruCell ----

template <typename S>
GruCell<S>::GruCell(int input_size, int hidden_size)
    : w_ih(Matrix<S>::Zero(3 * hidden_size, input_size)),
      w_hh(Matrix<S>::Zero(3 * hidden_size, hidden_size)),
      b_ih(Matrix<S>::Zero(3 * hidden_size, 1)),
      b_hh(Matrix<S>::Zero(3 * hidden_size, 1)) {
  if (input_size < 1 || hidden_size < 1) throw ConfigError("gru: sizes must be >= 1");
}

template <typename S>
void GruCell<S>::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size()));
  fill_uniform(w_ih, rng, bound);
  fill_uniform(w_hh, rng, bound);
  fill_uniform(b_ih, rng, bound);
  fill_uniform(b_hh, rng, bound);
}

template <typename S>
Matrix<S> GruCell<S>::forward(const Matrix<S>& x, const Matrix<S>& h,
                              Cache* cache) const {
  const Eigen::Index H = hidden_size();
  if (x.rows() != w_ih.cols() || h.rows() != H || x.cols() != h.cols()) {
    throw ContractError("gru forward: shape mismatch");
  }
  Matrix<S> gi = w_ih * x;
  gi.colwise() += b_ih.col(0);
  Matrix<S> gh = w_hh * h;
  gh.colwise() += b_hh.col(0);

  auto sig = [](S v) { return sigmoid(v); };
  Matrix<S> r = (gi.topRows(H) + gh.topRows(H)).unaryExpr(sig);
  Matrix<S> z = (gi.middleRows(H, H) + gh.middleRows(H, H)).unaryExpr(sig);
  Matrix<S> hn = gh.bottomRows(H);
  Matrix<S> n = (gi.bottomRows(H).array() + r.array() * hn.array()).tanh().matrix();
  Matrix<S> out = ((S(1) - z.array()) * n.array() + z.array() * h.array()).matrix();
  if (cache != nullptr) {
    cache->x = x;
    cache->h = h;
    cache->r = std::move(r);
    cache->z = std::move(z);
    cache->n = std::move(n);
    cache->hn = std::move(hn);
  }
  return out;
}

template <typename S>
std::pair<Matrix<S>, Matrix<S>> GruCell<S>::backward(const Cache& c,
                                                     const Matrix<S>& dh_next,
                                                     GruCell& grad,
                                                     bool need_dx) const {
  const Eigen::Index H = hidden_size();
  const auto dn = (dh_next.array() * (S(1) - c.z.array())).eval();
  const auto dz = (dh_next.array() * (c.h.array() - c.n.array())).eval();
  Matrix<S> dh = (dh_next.array() * c.z.array()).matrix();

  const auto dn_pre = (dn * (S(1) - c.n.array().square())).eval();
  const auto dr = (dn_pre * c.hn.array()).eval();
  const auto dhn = (dn_pre * c.r.array()).eval();
  const auto dr_pre = (dr * c.r.array() * (S(1) - c.r.array())).eval();
  const auto dz_pre = (dz * c.z.array() * (S(1) - c.z.array())).eval();

  Matrix<S> dgi(3 * H, dh_next.cols());
  dgi.topRows(H) = dr_pre.matrix();
  dgi.middleRows(H, H) = dz_pre.matrix();
  dgi.bottomRows(H) = dn_pre.matrix();
  Matrix<S> dgh = dgi;
  dgh.bottomRows(H) = dhn.matrix();

  grad.w_ih.noalias() += dgi * c.x.transpose();
  grad.b_ih.col(0) += dgi.rowwise().sum();
  grad.w_hh.noalias() += dgh * c.h.transpose();
  grad.b_hh.col(0) += dgh.rowwise().sum();
  dh.noalias() += w_hh.transpose() * dgh;
  Matrix<S> dx;
  if (need_dx) dx = w_ih.transpose() * dgi;
  return {std::move(dx), std::move(dh)};
}

template <typename S>
void GruCell<S>::collect(ParamList<S>& out, const std::string& prefix) {
  out.push_back({prefix + ".w_ih", &w_ih});
  out.push_back({prefix + ".w_hh", &w_hh});
  out.push_back({prefix + ".b_ih", &b_ih});
  out.push_back({prefix + ".b_hh", &b_hh});
}

// ---- softmax ----

template <typename S>
Matrix<S> softmax_columns(const Matrix<S>& logits) {
  Matrix<S> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const S m = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - m).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

template <typename S>
Matrix<S> softmax_backward(const Matrix<S>& p, const Matrix<S>& dp) {
  Matrix<S> dz(p.rows(), p.cols());
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const S dot = p.col(j).dot(dp.col(j));
    dz.col(j) = (p.col(j).array() * (dp.col(j).array() - dot)).matrix();
  }
  return dz;
}

template Matrix<float> softmax_columns(const Matrix<float>&);
template Matrix<double> softmax_columns(const Matrix<double>&);
template Matrix<float> softmax_backward(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> softmax_backward(const Matrix<double>&, const Matrix<double>&);

template class Conv2d<float>;
template class Conv2d<double>;
template class Linear<float>;
template class Linear<double>;
template class GruCell<float>;
template class GruCell<double>;

}  // namespace adafocus::nn
