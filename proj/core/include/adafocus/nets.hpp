#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adafocus/layers.hpp"

namespace adafocus::nn {

struct ConvLayerSpec {
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  Nonlinearity act = Nonlinearity::kRelu;
  bool operator==(const ConvLayerSpec&) const = default;
};

struct ConvBackboneSpec {
  int input_channels = 1;
  std::vector<ConvLayerSpec> layers;

  void validate() const;
  int output_channels() const { return layers.back().out_channels; }
  /// Spatial extent of the final feature map for a square input side.
  int output_extent(int input_side) const;
  bool operator==(const ConvBackboneSpec&) const = default;

  /// Light glance network: 3 stride-2 convs, 8 -> 16 -> 16 channels.
  static ConvBackboneSpec default_glance(int input_channels);
  /// Heavier focus network: 16 -> 32 -> 32 -> 64 channels, strides 1,2,1,2.
  static ConvBackboneSpec default_focus(int input_channels);
};

enum class FeatureSource { kGlance, kFocus };

/// `count` images of [channels x height x width], stored as
/// [channels x (count * height * width)].
template <typename S>
struct FeatureMap {
  Matrix<S> data;
  int count = 1;
  int height = 0;
  int width = 0;
  FeatureSource source = FeatureSource::kGlance;

  int channels() const { return static_cast<int>(data.rows()); }
  /// Single image `i` as [channels x (height * width)].
  Matrix<S> image(int i) const {
    const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
    return data.middleCols(i * plane, plane);
  }
};

/// Packs frames of [C x H x W] floats into [C x (n * H * W)].
template <typename S>
Matrix<S> pack_images(std::span<const std::span<const float>> images,
                      int channels, int height, int width);

template <typename S>
class ConvBackbone {
 public:
  struct Cache {
    std::vector<typename Conv2d<S>::Cache> layers;
  };

  ConvBackbone() = default;
  explicit ConvBackbone(ConvBackboneSpec spec, FeatureSource role = FeatureSource::kGlance,
                        int expected_input = 0);

  void init(Rng& rng);
  /// `expected_input` > 0 pins the accepted input side (P for the focus
  /// network, H for the glance network).
  FeatureMap<S> forward(const Matrix<S>& images, int count, int height,
                        int width, Cache* cache) const;
  Matrix<S> backward(const Cache& cache, const Matrix<S>& dfeatures,
                     ConvBackbone& grad, bool need_dx) const;
  void collect(ParamList<S>& out, const std::string& prefix);

  const ConvBackboneSpec& spec() const { return spec_; }
  FeatureSource role() const { return role_; }
  int expected_input() const { return expected_input_; }
  std::size_t num_params() const;

 private:
  ConvBackboneSpec spec_;
  FeatureSource role_ = FeatureSource::kGlance;
  int expected_input_ = 0;
  std::vector<Conv2d<S>> layers_;
};

/// Global average pooling: [c x count] of per-image channel means.
template <typename S>
Matrix<S> pool(const FeatureMap<S>& fm);
template <typename S>
Matrix<S> pool_backward(const Matrix<S>& dpooled, int count, int height, int width);

enum class ClassifierKind { kRecurrent, kAveraging };

std::string_view to_string(ClassifierKind kind);
ClassifierKind parse_classifier_kind(std::string_view name);

/// Recurrent state carried between classify steps. `hidden` is used by the
/// recurrent head, `prob_sum`/`steps` by the averaging head.
template <typename S>
struct ClassifierState {
  Matrix<S> hidden;
  Matrix<S> prob_sum;
  int steps = 0;
};

template <typename S>
class Classifier {
 public:
  struct SequenceCache {
    Matrix<S> inputs;
    std::vector<typename GruCell<S>::Cache> cells;
    Matrix<S> hiddens;      // [H x T] (recurrent)
    Matrix<S> frame_probs;  // [classes x T] (averaging: per-frame softmax)
    Matrix<S> probs;        // [classes x T] p_t
  };

  Classifier() = default;
  Classifier(ClassifierKind kind, int input_size, int hidden_size, int num_classes);

  void init(Rng& rng);
  ClassifierState<S> initial_state(int batch = 1) const;
  /// One step over a column batch of inputs sharing `state`'s batch size.
  Matrix<S> step(const Matrix<S>& x, ClassifierState<S>& state) const;
  /// p_1..p_T for inputs [in x T].
  Matrix<S> forward_sequence(const Matrix<S>& inputs, SequenceCache* cache) const;
  /// Backpropagates dL/dp_t for all t; returns dL/dinputs when need_dx.
  Matrix<S> backward_sequence(const SequenceCache& cache, const Matrix<S>& dprobs,
                              Classifier& grad, bool need_dx) const;
  void collect(ParamList<S>& out, const std::string& prefix);

  ClassifierKind kind() const { return kind_; }
  int input_size() const { return input_size_; }
  int hidden_size() const { return hidden_size_; }
  int num_classes() const { return num_classes_; }

  GruCell<S> cell;  // unused by the averaging head
  Linear<S> head;

 private:
  ClassifierKind kind_ = ClassifierKind::kRecurrent;
  int input_size_ = 0, hidden_size_ = 0, num_classes_ = 0;
};

/// Mean over t of -log p_t[label]; also returns dL/dp.
template <typename S>
std::pair<S, Matrix<S>> sequence_cross_entropy(const Matrix<S>& probs, int label);

extern template class ConvBackbone<float>;
extern template class ConvBackbone<double>;
extern template class Classifier<float>;
extern template class Classifier<double>;

}  // namespace adafocus::nn
