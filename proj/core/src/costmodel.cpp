#include "adafocus/costmodel.hpp"

namespace adafocus {

MultiAdds conv_flops(int out_h, int out_w, int out_channels, int in_channels, int kernel) {
  return static_cast<MultiAdds>(out_h) * out_w * out_channels * in_channels * kernel * kernel;
}

MultiAdds linear_flops(int in, int out) { return static_cast<MultiAdds>(in) * out; }

MultiAdds gru_flops(int input_size, int hidden_size) {
  return 3 * static_cast<MultiAdds>(input_size) * hidden_size +
         3 * static_cast<MultiAdds>(hidden_size) * hidden_size;
}

MultiAdds count_flops(const nn::ConvBackboneSpec& spec, int height, int width) {
  if (height < 1 || width < 1) throw ContractError("count_flops: input shape must be positive");
  spec.validate();
  MultiAdds total = 0;
  int h = height, w = width, c = spec.input_channels;
  for (const auto& l : spec.layers) {
    h = nn::conv_out_extent(h, l.kernel, l.stride);
    w = nn::conv_out_extent(w, l.kernel, l.stride);
    total += conv_flops(h, w, l.out_channels, c, l.kernel);
    c = l.out_channels;
  }
  return total;
}

MultiAdds count_flops(const nn::ConvBackboneSpec& spec, int side) {
  return count_flops(spec, side, side);
}

MultiAdds count_flops(const PolicyShape& s) {
  if (s.feature_extent < 1 || s.feature_channels < 1) {
    throw ContractError("count_flops: policy input shape must be positive");
  }
  const int area = s.feature_extent * s.feature_extent;
  return conv_flops(s.feature_extent, s.feature_extent, s.compressed_channels,
                    s.feature_channels, 1) +
         gru_flops(s.compressed_channels * area, s.hidden_size) +
         linear_flops(s.hidden_size, s.num_actions) + linear_flops(s.hidden_size, 1);
}

MultiAdds classifier_flops(nn::ClassifierKind kind, int input_size, int hidden_size,
                           int num_classes) {
  if (kind == nn::ClassifierKind::kRecurrent) {
    return gru_flops(input_size, hidden_size) + linear_flops(hidden_size, num_classes);
  }
  return linear_flops(input_size, num_classes);
}

double patch_cost_ratio(int patch, int frame, const nn::ConvBackboneSpec& focus_spec) {
  if (patch > frame) throw ContractError("patch_cost_ratio: patch larger than frame");
  return static_cast<double>(count_flops(focus_spec, patch)) /
         static_cast<double>(count_flops(focus_spec, frame));
}

void CostLedger::add_frame(const FrameCost& f) {
  glance += f.glance;
  focus += f.focus;
  patch_policy += f.patch_policy;
  skip_policy += f.skip_policy;
  classifier += f.classifier;
  per_frame.push_back(f);
}

CostLedger episode_cost(const std::vector<bool>& kept, const ComponentCosts& costs) {
  CostLedger ledger;
  for (bool k : kept) {
    ledger.add_frame({costs.glance, k ? costs.focus : 0, costs.patch_policy,
                      costs.skip_policy, costs.classifier});
  }
  return ledger;
}

}  // namespace adafocus
