#pragma once

// Learned convex upsampling from 1/8 to full resolution.

#include "neuflow/layers.hpp"

namespace neuflow {

inline constexpr int kUpsampleFactor = 8;
inline constexpr int kMaskChannels = 9 * kUpsampleFactor * kUpsampleFactor;

/// Convex weights over the 3x3 coarse neighbourhood for each of the 8x8
/// sub-pixel positions. Channel nb*64 + sy*8 + sx at coarse pixel (y, x).
template <class T>
struct UpsampleMask {
  Var<T> weights;

  [[nodiscard]] T at(int y, int x, int sub, int neighbour) const {
    return weights.value()(neighbour * kUpsampleFactor * kUpsampleFactor + sub, y, x);
  }
};

template <class T>
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(ParameterSet<T>& ps, const NeuFlowConfig& cfg)
      : conv1_(ps, "upsampler.conv1", cfg.upsample_branch_dim + 2, cfg.mask_head_width, ConvGeometry{3, 1, 1}),
        conv2_(ps, "upsampler.conv2", cfg.mask_head_width, cfg.mask_head_width, ConvGeometry{3, 1, 1}),
        proj_(ps, "upsampler.proj", cfg.mask_head_width, kMaskChannels, ConvGeometry{3, 1, 1}) {}

  /// Softmax over the 9 neighbours of 576 logits predicted from (features, flow).
  UpsampleMask<T> operator()(const Var<T>& feat8_up, const Var<T>& flow8) const {
    require_spatial(flow8.shape(), feat8_up.shape(), "predict_mask");
    const Var<T> x = relu(conv2_(relu(conv1_(concat<T>({feat8_up, flow8})))));
    return UpsampleMask<T>{grouped_softmax(proj_(x), 9)};
  }

 private:
  Conv2d<T> conv1_, conv2_, proj_;
};

/// Full-resolution flow, values scaled by 8 to full-resolution pixels.
template <class T>
Var<T> convex_upsample(const Var<T>& flow8, const UpsampleMask<T>& mask) {
  return convex_upsample(flow8, mask.weights, kUpsampleFactor);
}

}  // namespace neuflow
