#pragma once

// Local refinement at 1/8 scale: warp image-two features by the coarse flow,
// correlate within a small window, regress a residual flow.

#include "neuflow/layers.hpp"

#include <vector>

namespace neuflow {

/// Per-pixel local cost volume; channel (dy+r)(2r+1) + (dx+r).
template <class T>
struct CorrelationVolume {
  Var<T> corr;
  int radius = 3;
};

template <class T>
CorrelationVolume<T> correlate(const Var<T>& f1, const Var<T>& f2_warped, int radius) {
  return CorrelationVolume<T>{local_correlation(f1, f2_warped, radius), radius};
}

/// Plain CNN over concat(correlation, features, coarse flow) predicting a
/// residual flow. The last layer starts at zero so a fresh refiner is the identity.
template <class T>
class Refiner {
 public:
  Refiner() = default;
  Refiner(ParameterSet<T>& ps, const NeuFlowConfig& cfg) {
    int c_in = cfg.correlation_channels() + cfg.feature_dim + 2;
    for (int l = 0; l < cfg.refinement_depth; ++l) {
      hidden_.emplace_back(ps, "refine.conv" + std::to_string(l), c_in, cfg.refinement_width, ConvGeometry{3, 1, 1});
      c_in = cfg.refinement_width;
    }
    head_ = Conv2d<T>(ps, "refine.head", c_in, 2, ConvGeometry{3, 1, 1}, /*zero_init=*/true);
  }

  Var<T> operator()(const CorrelationVolume<T>& corr, const Var<T>& f1, const Var<T>& coarse) const {
    require_spatial(corr.corr.shape(), f1.shape(), "refine");
    require_spatial(coarse.shape(), f1.shape(), "refine");
    Var<T> x = concat<T>({corr.corr, f1, coarse});
    for (const auto& conv : hidden_) x = relu(conv(x));
    return add(coarse, head_(x));
  }

  [[nodiscard]] int depth() const { return static_cast<int>(hidden_.size()); }

 private:
  std::vector<Conv2d<T>> hidden_;
  Conv2d<T> head_;
};

}  // namespace neuflow
