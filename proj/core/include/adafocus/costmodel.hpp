#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "adafocus/focuspolicy.hpp"
#include "adafocus/nets.hpp"

namespace adafocus {

/// Multiply-add count. Nonlinearities, pooling and bias adds are free.
using MultiAdds = std::uint64_t;

MultiAdds conv_flops(int out_h, int out_w, int out_channels, int in_channels, int kernel);
MultiAdds linear_flops(int in, int out);
/// Sum of the input and recurrent gate products: 3*in*H + 3*H*H.
MultiAdds gru_flops(int input_size, int hidden_size);

MultiAdds count_flops(const nn::ConvBackboneSpec& spec, int height, int width);
MultiAdds count_flops(const nn::ConvBackboneSpec& spec, int side);
MultiAdds count_flops(const PolicyShape& shape);
MultiAdds classifier_flops(nn::ClassifierKind kind, int input_size, int hidden_size,
                           int num_classes);

/// count_flops(spec, P) / count_flops(spec, H).
double patch_cost_ratio(int patch, int frame, const nn::ConvBackboneSpec& focus_spec);

/// Per-frame cost of each component for one bundle configuration.
struct ComponentCosts {
  MultiAdds glance = 0;
  MultiAdds focus = 0;  // one P x P patch
  MultiAdds patch_policy = 0;
  MultiAdds skip_policy = 0;  // 0 when the skip gate is absent
  MultiAdds classifier = 0;
};

struct FrameCost {
  MultiAdds glance = 0, focus = 0, patch_policy = 0, skip_policy = 0, classifier = 0;
  MultiAdds total() const { return glance + focus + patch_policy + skip_policy + classifier; }
  bool operator==(const FrameCost&) const = default;
};

struct CostLedger {
  MultiAdds glance = 0, focus = 0, patch_policy = 0, skip_policy = 0, classifier = 0;
  std::vector<FrameCost> per_frame;

  MultiAdds total() const { return glance + focus + patch_policy + skip_policy + classifier; }
  void add_frame(const FrameCost& f);
  bool operator==(const CostLedger&) const = default;
};

/// Glance, policies and classifier are charged every frame; the focus
/// network only on kept frames. The skip gate is charged on every frame,
/// skipped ones included, since its state still advances.
CostLedger episode_cost(const std::vector<bool>& kept, const ComponentCosts& costs);

}  // namespace adafocus
