#pragma once

#include <cstdint>
#include <random>

#include "s2fpn/attention.hpp"
#include "s2fpn/module.hpp"

namespace s2fpn {

/// Depthwise 3x3 (stride 2 for the coarse generator, 1 for the adapter)
/// followed by a pointwise 1x1 + BN + ReLU projection.
template <typename T>
class DepthwiseProjection : public Module<T> {
 public:
  DepthwiseProjection(std::int64_t in, std::int64_t out, int stride, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);

  /// Output of the depthwise stage alone, before the pointwise projection.
  Tensor<T> depthwise_forward(const Tensor<T>& x) const { return depthwise.forward(x); }

  Conv2d<T> depthwise;
  ConvBnAct<T> pointwise;

 private:
  int stride_;
};

/// Coarse feature generator: halves the spatial dims of F5.
template <typename T>
class Cfgb : public DepthwiseProjection<T> {
 public:
  Cfgb(std::int64_t in, std::int64_t out, std::mt19937_64& rng)
      : DepthwiseProjection<T>(in, out, 2, rng) {}
};

/// Feature adaptation block: shape-preserving projection of F5.
template <typename T>
class Fab : public DepthwiseProjection<T> {
 public:
  Fab(std::int64_t in, std::int64_t out, std::mt19937_64& rng)
      : DepthwiseProjection<T>(in, out, 1, rng) {}
};

/// Feature refinement: 1x1 (2P -> P) and 3x3 (P -> P), each with BN + ReLU.
template <typename T>
class Frb : public Module<T> {
 public:
  Frb(std::int64_t in, std::int64_t out, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);

  ConvBnAct<T> conv1;
  ConvBnAct<T> conv3;
};

/// Deep-supervision head: 3x3 conv + BN + ReLU, dropout, 1x1 projection.
template <typename T>
class AuxHead : public Module<T> {
 public:
  AuxHead(std::int64_t width, std::int64_t num_classes, double dropout, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);

  ConvBnAct<T> conv;
  Dropout<T> drop;
  Conv2d<T> classifier;
};

struct ApfSpec {
  int level = 2;                     ///< i in {2,3,4,5}
  std::int64_t low_channels = 64;    ///< channels of F_{i-1}
  std::int64_t coarse_channels = 64; ///< channels of the incoming coarse feature
  std::int64_t width = 128;          ///< P, the stage width
  std::int64_t num_classes = 19;
  double dropout = 0.1;
  std::int64_t cam_reduction = 4;
  bool literal_ssam = false;
};

/// Intermediates of one fusion stage.
template <typename T>
struct ApfTrace {
  Tensor<T> lateral;   ///< 1x1 + BN + ReLU of the low-level feature
  Tensor<T> up;        ///< coarse feature upsampled and channel-matched
  Tensor<T> concat;    ///< [up, lateral]
  Tensor<T> refined;   ///< F_R, output of the refinement block
  Tensor<T> crb;       ///< crb_conv(lateral)
  Tensor<T> channel_gate;  ///< CAM(F_R), (N,P,1,1)
  Tensor<T> x_a;       ///< crb * channel_gate
  Tensor<T> coarse;    ///< coarse_conv(up)
  SsamTrace<T> ssam;   ///< strip attention on F_R
  Tensor<T> x_b;       ///< coarse * SSAM(F_R)
  Tensor<T> fused;     ///< x_a + x_b
  Tensor<T> aux;       ///< deep-supervision logits (training only)
  Tensor<T> out;       ///< next_refine(fused), fed to the next stage
};

/// Attention pyramid fusion stage combining a coarse feature with the
/// adjacent lower-level backbone feature.
template <typename T>
class ApfStage : public Module<T> {
 public:
  ApfStage(const ApfSpec& spec, std::mt19937_64& rng);

  ApfTrace<T> trace(const Tensor<T>& coarse, const Tensor<T>& low);
  /// Returns (out, aux); aux is undefined in eval mode unless `with_aux`.
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& coarse, const Tensor<T>& low);

  const ApfSpec& spec() const { return spec_; }
  /// Runs the aux head even in eval mode (for inspection).
  bool force_aux = false;

  ConvBnAct<T> lateral;
  ConvBnAct<T> coarse_proj;
  Frb<T> frb;
  ConvBnAct<T> crb_conv;
  Conv2d<T> coarse_conv;
  Cam<T> cam;
  Ssam<T> ssam;
  AuxHead<T> head;
  ConvBnAct<T> next_refine;

 private:
  ApfSpec spec_;
};

}  // namespace s2fpn
