#pragma once

#include <Eigen/Core>
#include <string>
#include <string_view>
#include <vector>

#include "adafocus/common.hpp"

namespace adafocus::nn {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Non-owning handle to a named parameter tensor. A module's gradient
/// buffer is another instance of the same module, so collecting params
/// from both yields index-aligned lists.
template <typename S>
struct ParamRef {
  std::string name;
  Matrix<S>* value;
};

template <typename S>
using ParamList = std::vector<ParamRef<S>>;

template <typename S>
std::size_t count_params(const ParamList<S>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value->size());
  return n;
}

template <typename S>
void zero_params(const ParamList<S>& params) {
  for (const auto& p : params) p.value->setZero();
}

/// Hash of all parameter bytes, in list order.
template <typename S>
std::uint64_t hash_params(const ParamList<S>& params) {
  std::uint64_t h = fnv1a(std::string_view{});
  for (const auto& p : params) {
    h = fnv1a(p.name, h);
    h = fnv1a_values(std::span<const S>(p.value->data(),
                                        static_cast<std::size_t>(p.value->size())),
                     h);
  }
  return h;
}

enum class Nonlinearity { kIdentity, kRelu, kTanh };

std::string_view to_string(Nonlinearity act);
Nonlinearity parse_nonlinearity(std::string_view name);

/// Output extent of a "same"-padded convolution: ceil(in / stride).
int conv_out_extent(int in, int kernel, int stride);

/// Convolution with padding kernel/2 followed by a pointwise nonlinearity.
/// Activations are laid out [channels x (count * h * w)], one image after
/// another along the columns.
template <typename S>
class Conv2d {
 public:
  struct Cache {
    Matrix<S> cols;
    Matrix<S> out;  // post-activation
    int count = 0, in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride,
         Nonlinearity act);

  void init(Rng& rng);
  Matrix<S> forward(const Matrix<S>& x, int count, int h, int w,
                    Cache* cache) const;
  /// Accumulates parameter gradients into `grad`; returns dL/dx when
  /// `need_dx`, otherwise an empty matrix.
  Matrix<S> backward(const Cache& cache, const Matrix<S>& dy, Conv2d& grad,
                     bool need_dx) const;
  void collect(ParamList<S>& out, const std::string& prefix);

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  int kernel() const { return kernel_; }
  int stride() const { return stride_; }
  Nonlinearity activation() const { return act_; }

  Matrix<S> weight;  // [out x in*k*k]
  Matrix<S> bias;    // [out x 1]

 private:
  int in_channels_ = 0, out_channels_ = 0, kernel_ = 1, stride_ = 1;
  Nonlinearity act_ = Nonlinearity::kIdentity;
};

/// y = W x + b over column batches.
template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out);

  void init(Rng& rng, double scale = 1.0);
  Matrix<S> forward(const Matrix<S>& x) const;
  Matrix<S> backward(const Matrix<S>& x, const Matrix<S>& dy, Linear& grad,
                     bool need_dx) const;
  void collect(ParamList<S>& out, const std::string& prefix);

  int in_features() const { return static_cast<int>(weight.cols()); }
  int out_features() const { return static_cast<int>(weight.rows()); }

  Matrix<S> weight;  // [out x in]
  Matrix<S> bias;    // [out x 1]
};

/// Gated recurrent unit, gate order (reset, update, candidate):
///   r = sig(Wr x + br + Ur h + cr), z = sig(Wz x + bz + Uz h + cz)
///   n = tanh(Wn x + bn + r * (Un h + cn)),  h' = (1 - z) * n + z * h
template <typename S>
class GruCell {
 public:
  struct Cache {
    Matrix<S> x, h, r, z, n, hn;
  };

  GruCell() = default;
  GruCell(int input_size, int hidden_size);

  void init(Rng& rng);
  Matrix<S> forward(const Matrix<S>& x, const Matrix<S>& h, Cache* cache) const;
  /// Returns (dx, dh_prev) given dL/dh'.
  std::pair<Matrix<S>, Matrix<S>> backward(const Cache& cache,
                                           const Matrix<S>& dh_next,
                                           GruCell& grad, bool need_dx) const;
  void collect(ParamList<S>& out, const std::string& prefix);

  int input_size() const { return static_cast<int>(w_ih.cols()); }
  int hidden_size() const { return static_cast<int>(w_hh.cols()); }

  Matrix<S> w_ih;  // [3H x in]
  Matrix<S> w_hh;  // [3H x H]
  Matrix<S> b_ih;  // [3H x 1]
  Matrix<S> b_hh;  // [3H x 1]
};

/// Column-wise softmax.
template <typename S>
Matrix<S> softmax_columns(const Matrix<S>& logits);

/// Given p = softmax(z) and dL/dp, returns dL/dz.
template <typename S>
Matrix<S> softmax_backward(const Matrix<S>& p, const Matrix<S>& dp);

template <typename S>
S sigmoid(S x);

extern template class Conv2d<float>;
extern template class Conv2d<double>;
extern template class Linear<float>;
extern template class Linear<double>;
extern template class GruCell<float>;
extern template class GruCell<double>;

}  // namespace adafocus::nn
