#pragma once

#include <cstdint>
#include <random>

#include "s2fpn/module.hpp"

namespace s2fpn {

/// Intermediates of one strip-attention pass, exposed for verification.
template <typename T>
struct SsamTrace {
  Tensor<T> z_avg;      ///< (N,C,H,1) row means
  Tensor<T> z_max;      ///< (N,C,H,1) row maxima
  Tensor<T> f1;         ///< shared_conv(z_avg)
  Tensor<T> f2;         ///< shared_conv(z_max)
  Tensor<T> attention;  ///< softmax over H of f1 * f2
  Tensor<T> f_scale;    ///< attention * f1 + attention * f2
  Tensor<T> output;     ///< alpha * f_scale + (1 - alpha) * input, strip broadcast along W
};

/// Scale-aware strip attention.
///
/// Each row of the input is pooled to a (C,H,1) strip by average and by max.
/// Both strips go through the same 1x1 convolution, their product is
/// normalized with a softmax along H, and the attention-weighted strips are
/// blended back into the input with a learnable scalar alpha (initialized to
/// 0, so a fresh module is the identity).
template <typename T>
class Ssam : public Module<T> {
 public:
  /// `literal_scale` replaces A*F1 + A*F2 with A*F2 + A*F2 for ablations.
  Ssam(std::int64_t channels, std::mt19937_64& rng, bool literal_scale = false);

  Tensor<T> forward(const Tensor<T>& x) { return trace(x).output; }
  SsamTrace<T> trace(const Tensor<T>& x);

  std::int64_t channels() const { return channels_; }
  Conv2d<T> shared_conv;
  Tensor<T> alpha;

 private:
  std::int64_t channels_;
  bool literal_scale_;
};

/// Channel attention: GAP -> 1x1 (C -> C/r) -> ReLU -> 1x1 (C/r -> C) -> sigmoid.
/// Produces an (N,C,1,1) gate in (0,1).
template <typename T>
class Cam : public Module<T> {
 public:
  Cam(std::int64_t channels, std::mt19937_64& rng, std::int64_t reduction = 4);
  Tensor<T> forward(const Tensor<T>& x);

  std::int64_t channels() const { return channels_; }
  Conv2d<T> squeeze_conv;
  Conv2d<T> excite_conv;

 private:
  std::int64_t channels_;
};

}  // namespace s2fpn
