#pragma once

// Shallow multi-scale CNN backbone. Each pyramid level of the input image
// gets its own two-convolution block strided down to 1/8; the four 1/8 maps
// are concatenated and fused, then merged with the 1/16 level.

#include "neuflow/layers.hpp"

#include <array>
#include <atomic>
#include <memory>
#include <vector>

namespace neuflow {

/// How an image was padded up; used to crop outputs back.
struct PadSpec {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;
  int original_h = 0;
  int original_w = 0;

  friend bool operator==(const PadSpec&, const PadSpec&) = default;
};

/// Pads bottom/right with edge replication to the next multiple of `multiple`.
template <class T>
std::pair<Tensor<T>, PadSpec> pad_to_multiple(const Tensor<T>& img, int multiple) {
  if (multiple <= 0) throw ConfigError("pad_to_multiple: multiple must be > 0");
  const Shape s = img.shape();
  if (s.h <= 0 || s.w <= 0) throw ShapeError("pad_to_multiple: empty image");
  const int ph = (s.h + multiple - 1) / multiple * multiple;
  const int pw = (s.w + multiple - 1) / multiple * multiple;
  PadSpec pad{0, ph - s.h, 0, pw - s.w, s.h, s.w};
  if (ph == s.h && pw == s.w) return {img, pad};
  Tensor<T> out(s.c, ph, pw);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) out(c, y, x) = img(c, std::min(y, s.h - 1), std::min(x, s.w - 1));
  return {std::move(out), pad};
}

/// Levels 1/1 .. 1/16 by repeated 2x2 area averaging.
template <class T>
std::vector<Tensor<T>> build_pyramid(const Tensor<T>& img, int levels = 5) {
  const Shape s = img.shape();
  const int m = 1 << (levels - 1);
  if (s.h % m != 0 || s.w % m != 0) {
    throw ShapeError("build_pyramid: image " + to_string(s) + " not padded to a multiple of " + std::to_string(m));
  }
  std::vector<Tensor<T>> pyr{img};
  for (int l = 1; l < levels; ++l) {
    const Tensor<T>& prev = pyr.back();
    const Shape p = prev.shape();
    Tensor<T> next(p.c, p.h / 2, p.w / 2);
    for (int c = 0; c < p.c; ++c)
      for (int y = 0; y < p.h / 2; ++y)
        for (int x = 0; x < p.w / 2; ++x)
          next(c, y, x) = T(0.25) * ((prev(c, 2 * y, 2 * x) + prev(c, 2 * y, 2 * x + 1)) +
                                     (prev(c, 2 * y + 1, 2 * x) + prev(c, 2 * y + 1, 2 * x + 1)));
    pyr.push_back(std::move(next));
  }
  return pyr;
}

template <class T>
struct FeaturePyramid {
  Var<T> feat16;
  Var<T> feat8;
  Var<T> feat8_up;  // upsampling branch, image one only; may be undefined
};

template <class T>
class Backbone {
 public:
  static constexpr int kLevels = 5;

  Backbone() = default;
  Backbone(ParameterSet<T>& ps, const NeuFlowConfig& cfg) : feature_dim_(cfg.feature_dim) {
    for (int l = 0; l < 4; ++l) {
      level_blocks_[l] = CnnBlock<T>(ps, "backbone.level" + std::to_string(l),
                                     BlockSpec{3, 0, cfg.per_level_channels[l], 8 >> l}, cfg.norm_groups);
    }
    level_blocks_[4] =
        CnnBlock<T>(ps, "backbone.level4", BlockSpec{3, 0, cfg.per_level_channels[4], 1}, cfg.norm_groups);
    fuse8_ = CnnBlock<T>(ps, "backbone.fuse8",
                         BlockSpec{cfg.level_concat_channels(), cfg.fusion_hidden_dim, cfg.feature_dim, 1},
                         cfg.norm_groups);
    merge16_ = CnnBlock<T>(
        ps, "backbone.merge16",
        BlockSpec{cfg.feature_dim + cfg.per_level_channels[4], cfg.merge_hidden_dim, cfg.feature_dim, 1},
        cfg.norm_groups);
    upsample_branch_ =
        CnnBlock<T>(ps, "backbone.upsample_branch", BlockSpec{3, 0, cfg.upsample_branch_dim, 8}, cfg.norm_groups);
  }

  /// feat8 [D, H/8, W/8] and feat16 [D, H/16, W/16] of a padded image.
  FeaturePyramid<T> extract_features(const Tensor<T>& padded) const {
    ++*invocations_;
    const auto pyr = build_pyramid(padded, kLevels);
    std::vector<Var<T>> eighth;
    eighth.reserve(4);
    for (int l = 0; l < 4; ++l) eighth.push_back(level_blocks_[l](constant(pyr[l])));
    FeaturePyramid<T> out;
    out.feat8 = fuse8_(concat(eighth));
    const Var<T> level16 = level_blocks_[4](constant(pyr[4]));
    out.feat16 = merge16_(concat<T>({avg_pool2(out.feat8), level16}));
    return out;
  }

  /// Separate stride-8 block over the full-resolution image, feeding only the upsampler.
  Var<T> extract_upsample_features(const Tensor<T>& padded) const {
    const Shape s = padded.shape();
    if (s.h % 8 != 0 || s.w % 8 != 0) throw ShapeError("upsample features: image not padded to multiple of 8");
    return upsample_branch_(constant(padded));
  }

  [[nodiscard]] int block_count() const { return static_cast<int>(level_blocks_.size()) + 3; }
  [[nodiscard]] int convolution_count() const { return CnnBlock<T>::kConvolutions * block_count(); }
  [[nodiscard]] long invocations() const { return invocations_->load(); }

 private:
  int feature_dim_ = 0;
  std::array<CnnBlock<T>, kLevels> level_blocks_{};
  CnnBlock<T> fuse8_;
  CnnBlock<T> merge16_;
  CnnBlock<T> upsample_branch_;
  std::shared_ptr<std::atomic<long>> invocations_ = std::make_shared<std::atomic<long>>(0);
};

}  // namespace neuflow
