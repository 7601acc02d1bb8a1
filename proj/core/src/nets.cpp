#include "adafocus/nets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace adafocus::nn {

void ConvBackboneSpec::validate() const {
  if (input_channels < 1) throw ConfigError("backbone: input_channels must be >= 1");
  if (layers.empty()) throw ConfigError("backbone: at least one layer required");
  for (const auto& l : layers) {
    if (l.out_channels < 1) throw ConfigError("backbone: out_channels must be >= 1");
    if (l.kernel < 1 || l.kernel % 2 == 0) throw ConfigError("backbone: kernel must be odd");
    // Same padding with stride >= 1 never grows the spatial extent.
    if (l.stride < 1) throw ConfigError("backbone: stride must be >= 1");
  }
}

int ConvBackboneSpec::output_extent(int input_side) const {
  int side = input_side;
  for (const auto& l : layers) side = conv_out_extent(side, l.kernel, l.stride);
  return side;
}

ConvBackboneSpec ConvBackboneSpec::default_glance(int input_channels) {
  return {input_channels,
          {{8, 3, 2, Nonlinearity::kRelu},
           {16, 3, 2, Nonlinearity::kRelu},
           {16, 3, 2, Nonlinearity::kRelu}}};
}

ConvBackboneSpec ConvBackboneSpec::default_focus(int input_channels) {
  return {input_channels,
          {{16, 3, 1, Nonlinearity::kRelu},
           {32, 3, 2, Nonlinearity::kRelu},
           {32, 3, 1, Nonlinearity::kRelu},
           {64, 3, 2, Nonlinearity::kRelu}}};
}

template <typename S>
Matrix<S> pack_images(std::span<const std::span<const float>> images,
                      int channels, int height, int width) {
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  const auto n = static_cast<Eigen::Index>(images.size());
  Matrix<S> out(channels, n * plane);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(img.size()) != channels * plane) {
      throw ContractError("pack_images: image size mismatch");
    }
    for (int c = 0; c < channels; ++c) {
      for (Eigen::Index p = 0; p < plane; ++p) {
        out(c, i * plane + p) = static_cast<S>(img[c * plane + p]);
      }
    }
  }
  return out;
}

template Matrix<float> pack_images<float>(std::span<const std::span<const float>>, int, int, int);
template Matrix<double> pack_images<double>(std::span<const std::span<const float>>, int, int, int);

// ---- ConvBackbone ----

template <typename S>
ConvBackbone<S>::ConvBackbone(ConvBackboneSpec spec, FeatureSource role,
                              int expected_input)
    : spec_(std::move(spec)), role_(role), expected_input_(expected_input) {
  spec_.validate();
  int in = spec_.input_channels;
  for (const auto& l : spec_.layers) {
    layers_.emplace_back(in, l.out_channels, l.kernel, l.stride, l.act);
    in = l.out_channels;
  }
}

template <typename S>
void ConvBackbone<S>::init(Rng& rng) {
  for (auto& l : layers_) l.init(rng);
}

template <typename S>
FeatureMap<S> ConvBackbone<S>::forward(const Matrix<S>& images, int count,
                                       int height, int width, Cache* cache) const {
  if (expected_input_ > 0 && (height != expected_input_ || width != expected_input_)) {
    throw ContractError("backbone: input is " + std::to_string(height) + "x" +
                        std::to_string(width) + ", expected " +
                        std::to_string(expected_input_) + "x" +
                        std::to_string(expected_input_));
  }
  if (images.rows() != spec_.input_channels) {
    throw ContractError("backbone: channel count mismatch");
  }
  if (cache != nullptr) cache->layers.assign(layers_.size(), {});
  Matrix<S> x = images;
  int h = height, w = width;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x, count, h, w, cache ? &cache->layers[i] : nullptr);
    h = conv_out_extent(h, layers_[i].kernel(), layers_[i].stride());
    w = conv_out_extent(w, layers_[i].kernel(), layers_[i].stride());
  }
  return FeatureMap<S>{std::move(x), count, h, w, role_};
}

template <typename S>
Matrix<S> ConvBackbone<S>::backward(const Cache& cache, const Matrix<S>& dfeatures,
                                    ConvBackbone& grad, bool need_dx) const {
  Matrix<S> d = dfeatures;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const bool want = need_dx || i > 0;
    d = layers_[i].backward(cache.layers[i], d, grad.layers_[i], want);
  }
  return d;
}

template <typename S>
void ConvBackbone<S>::collect(ParamList<S>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(out, prefix + ".conv" + std::to_string(i));
  }
}

template <typename S>
std::size_t ConvBackbone<S>::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

template <typename S>
Matrix<S> pool(const FeatureMap<S>& fm) {
  const Eigen::Index plane = static_cast<Eigen::Index>(fm.height) * fm.width;
  Matrix<S> out(fm.channels(), fm.count);
  for (int i = 0; i < fm.count; ++i) {
    out.col(i) = fm.data.middleCols(i * plane, plane).rowwise().mean();
  }
  return out;
}

template <typename S>
Matrix<S> pool_backward(const Matrix<S>& dpooled, int count, int height, int width) {
  const Eigen::Index plane = static_cast<Eigen::Index>(height) * width;
  Matrix<S> d(dpooled.rows(), count * plane);
  const S inv = S(1) / static_cast<S>(plane);
  for (int i = 0; i < count; ++i) {
    d.middleCols(i * plane, plane).colwise() = dpooled.col(i) * inv;
  }
  return d;
}

template Matrix<float> pool(const FeatureMap<float>&);
template Matrix<double> pool(const FeatureMap<double>&);
template Matrix<float> pool_backward(const Matrix<float>&, int, int, int);
template Matrix<double> pool_backward(const Matrix<double>&, int, int, int);

// ---- Classifier ----

std::string_view to_string(ClassifierKind kind) {
  return kind == ClassifierKind::kRecurrent ? "recurrent" : "averaging";
}

ClassifierKind parse_classifier_kind(std::string_view name) {
  if (name == "recurrent") return ClassifierKind::kRecurrent;
  if (name == "averaging") return ClassifierKind::kAveraging;
  throw ConfigError("unknown classifier kind '" + std::string(name) + "'");
}

template <typename S>
Classifier<S>::Classifier(ClassifierKind kind, int input_size, int hidden_size,
                          int num_classes)
    : kind_(kind),
      input_size_(input_size),
      hidden_size_(hidden_size),
      num_classes_(num_classes) {
  if (num_classes < 2) throw ConfigError("classifier: num_classes must be >= 2");
  if (kind == ClassifierKind::kRecurrent) {
    cell = GruCell<S>(input_size, hidden_size);
    head = Linear<S>(hidden_size, num_classes);
  } else {
    head = Linear<S>(input_size, num_classes);
  }
}

template <typename S>
void Classifier<S>::init(Rng& rng) {
  if (kind_ == ClassifierKind::kRecurrent) cell.init(rng);
  // Small output weights: near-uniform predictions before training.
  head.init(rng, 0.1);
}

template <typename S>
ClassifierState<S> Classifier<S>::initial_state(int batch) const {
  ClassifierState<S> st;
  if (kind_ == ClassifierKind::kRecurrent) {
    st.hidden = Matrix<S>::Zero(hidden_size_, batch);
  }
  st.prob_sum = Matrix<S>::Zero(num_classes_, batch);
  return st;
}

template <typename S>
Matrix<S> Classifier<S>::step(const Matrix<S>& x, ClassifierState<S>& state) const {
  if (x.rows() != input_size_) {
    throw ContractError("classifier: input has " + std::to_string(x.rows()) +
                        " features, expected " + std::to_string(input_size_));
  }
  ++state.steps;
  if (kind_ == ClassifierKind::kRecurrent) {
    state.hidden = cell.forward(x, state.hidden, nullptr);
    return softmax_columns<S>(head.forward(state.hidden));
  }
  state.prob_sum += softmax_columns<S>(head.forward(x));
  return state.prob_sum / static_cast<S>(state.steps);
}

template <typename S>
Matrix<S> Classifier<S>::forward_sequence(const Matrix<S>& inputs,
                                          SequenceCache* cache) const {
  if (inputs.rows() != input_size_) throw ContractError("classifier: input size mismatch");
  const Eigen::Index T = inputs.cols();
  Matrix<S> probs(num_classes_, T);
  if (kind_ == ClassifierKind::kRecurrent) {
    Matrix<S> hiddens(hidden_size_, T);
    Matrix<S> h = Matrix<S>::Zero(hidden_size_, 1);
    if (cache) cache->cells.assign(T, {});
    for (Eigen::Index t = 0; t < T; ++t) {
      h = cell.forward(inputs.col(t), h, cache ? &cache->cells[t] : nullptr);
      hiddens.col(t) = h;
    }
    probs = softmax_columns<S>(head.forward(hiddens));
    if (cache) cache->hiddens = std::move(hiddens);
  } else {
    const Matrix<S> frame_probs = softmax_columns<S>(head.forward(inputs));
    Vector<S> running = Vector<S>::Zero(num_classes_);
    for (Eigen::Index t = 0; t < T; ++t) {
      running += frame_probs.col(t);
      probs.col(t) = running / static_cast<S>(t + 1);
    }
    if (cache) cache->frame_probs = frame_probs;
  }
  if (cache) {
    cache->inputs = inputs;
    cache->probs = probs;
  }
  return probs;
}

template <typename S>
Matrix<S> Classifier<S>::backward_sequence(const SequenceCache& cache,
                                           const Matrix<S>& dprobs,
                                           Classifier& grad, bool need_dx) const {
  const Eigen::Index T = cache.inputs.cols();
  if (kind_ == ClassifierKind::kRecurrent) {
    const Matrix<S> dlogits = softmax_backward<S>(cache.probs, dprobs);
    const Matrix<S> dh_out = head.backward(cache.hiddens, dlogits, grad.head, true);
    Matrix<S> dinputs;
    if (need_dx) dinputs.resize(input_size_, T);
    Matrix<S> carry = Matrix<S>::Zero(hidden_size_, 1);
    for (Eigen::Index t = T; t-- > 0;) {
      Matrix<S> dh = dh_out.col(t) + carry;
      auto [dx, dh_prev] = cell.backward(cache.cells[t], dh, grad.cell, need_dx);
      if (need_dx) dinputs.col(t) = dx;
      carry = std::move(dh_prev);
    }
    return dinputs;
  }
  // p_t = mean_{s<=t} q_s  =>  dq_s = sum_{t>=s} dp_t / (t + 1).
  Matrix<S> dq(num_classes_, T);
  Vector<S> suffix = Vector<S>::Zero(num_classes_);
  for (Eigen::Index t = T; t-- > 0;) {
    suffix += dprobs.col(t) / static_cast<S>(t + 1);
    dq.col(t) = suffix;
  }
  const Matrix<S> dlogits = softmax_backward<S>(cache.frame_probs, dq);
  return head.backward(cache.inputs, dlogits, grad.head, need_dx);
}

template <typename S>
void Classifier<S>::collect(ParamList<S>& out, const std::string& prefix) {
  if (kind_ == ClassifierKind::kRecurrent) cell.collect(out, prefix + ".gru");
  head.collect(out, prefix + ".head");
}

template <typename S>
std::pair<S, Matrix<S>> sequence_cross_entropy(const Matrix<S>& probs, int label) {
  if (label < 0 || label >= probs.rows()) throw ContractError("cross entropy: label out of range");
  const Eigen::Index T = probs.cols();
  const S tiny = std::numeric_limits<S>::min();
  Matrix<S> d = Matrix<S>::Zero(probs.rows(), T);
  S loss = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const S p = std::max(probs(label, t), tiny);
    loss -= std::log(p);
    d(label, t) = S(-1) / (static_cast<S>(T) * p);
  }
  return {loss / static_cast<S>(T), std::move(d)};
}

template std::pair<float, Matrix<float>> sequence_cross_entropy(const Matrix<float>&, int);
template std::pair<double, Matrix<double>> sequence_cross_entropy(const Matrix<double>&, int);

template class ConvBackbone<float>;
template class ConvBackbone<double>;
template class Classifier<float>;
template class Classifier<double>;

}  // namespace adafocus::nn
