#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "s2fpn/backbone.hpp"
#include "s2fpn/pyramid.hpp"

namespace s2fpn {

/// Intermediates of the global feature upsample block.
template <typename T>
struct GfuTrace {
  Tensor<T> upsampled;  ///< X_F resized to X_P's spatial dims
  Tensor<T> pre;        ///< pre_conv(relu(upsampled))
  Tensor<T> context;    ///< ctx_conv(GAP(pre)), (N,P,1,1)
  Tensor<T> apf;        ///< apf_conv(X_P)
  Tensor<T> fused;      ///< context (broadcast) + apf
  Tensor<T> output;     ///< out_conv(fused)
};

/// Global feature upsample: adds a globally pooled context vector computed
/// from the adapted encoder feature to the finest pyramid feature.
///
/// With `literal` set, apf_conv and out_conv are plain 1x1 convolutions
/// (no BN/ReLU), which matches the compact printed formula.
template <typename T>
class Gfu : public Module<T> {
 public:
  Gfu(std::int64_t encoder_channels, std::int64_t width, std::mt19937_64& rng, bool literal = false);

  GfuTrace<T> trace(const Tensor<T>& encoder, const Tensor<T>& pyramid);
  Tensor<T> forward(const Tensor<T>& encoder, const Tensor<T>& pyramid) {
    return trace(encoder, pyramid).output;
  }

  Conv2d<T> pre_conv;
  Conv2d<T> ctx_conv;

  /// Applies the apf branch (1x1, plus BN + ReLU unless literal).
  Tensor<T> apf_branch(const Tensor<T>& x);
  Tensor<T> out_branch(const Tensor<T>& x);

  /// Branch layers: the ConvBnAct pair in the default mode, the plain
  /// convolutions in literal mode. The other pair is null.
  const ConvBnAct<T>* apf_conv() const { return apf_conv_ ? &*apf_conv_ : nullptr; }
  const ConvBnAct<T>* out_conv() const { return out_conv_ ? &*out_conv_ : nullptr; }
  const Conv2d<T>* apf_plain() const { return apf_plain_ ? &*apf_plain_ : nullptr; }
  const Conv2d<T>* out_plain() const { return out_plain_ ? &*out_plain_ : nullptr; }

 private:
  std::int64_t encoder_channels_;
  std::int64_t width_;
  std::optional<ConvBnAct<T>> apf_conv_;
  std::optional<ConvBnAct<T>> out_conv_;
  std::optional<Conv2d<T>> apf_plain_;
  std::optional<Conv2d<T>> out_plain_;
};

/// 1x1 classifier followed by bilinear resize to the input resolution.
template <typename T>
class SegHead : public Module<T> {
 public:
  SegHead(std::int64_t width, std::int64_t num_classes, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

  Conv2d<T> classifier;
};

struct ModelConfig {
  BackboneConfig backbone;
  std::int64_t num_classes = 19;
  /// Pyramid widths for APF2, APF3, APF4, APF5. FAB and GFU use the APF2 width.
  std::array<std::int64_t, 4> widths{48, 96, 160, 288};
  double head_dropout = 0.1;
  std::int64_t cam_reduction = 4;
  bool literal_ssam = false;
  bool literal_gfu = false;
  std::uint64_t seed = 0;

  /// Sets every pyramid level to the same width.
  void set_uniform_width(std::int64_t p) { widths = {p, p, p, p}; }
};

/// Logits of one forward pass. aux[k] is the deep-supervision output of
/// APF_{k+2}; aux entries are undefined in eval mode.
template <typename T>
struct ModelOutput {
  Tensor<T> main;
  std::array<Tensor<T>, 4> aux;
};

/// The complete segmentation network: backbone, CFGB/FAB adapters, four
/// attention pyramid fusion stages, GFU decoder and classifier.
template <typename T>
class S2Fpn : public Module<T> {
 public:
  explicit S2Fpn(const ModelConfig& cfg);

  ModelOutput<T> forward(const Tensor<T>& x);
  const ModelConfig& config() const { return cfg_; }
  /// Output strides of the aux heads (APF2..APF5).
  std::array<int, 4> pyramid_strides() const;

  Backbone<T>& backbone() { return *backbone_; }
  ApfStage<T>& apf(int level) { return *apf_[static_cast<std::size_t>(level - 2)]; }
  Gfu<T>& gfu() { return *gfu_; }
  Cfgb<T>& cfgb() { return *cfgb_; }
  Fab<T>& fab() { return *fab_; }
  SegHead<T>& head() { return *head_; }

 private:
  ModelConfig cfg_;
  std::mt19937_64 init_rng_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<Cfgb<T>> cfgb_;
  std::unique_ptr<Fab<T>> fab_;
  std::array<std::unique_ptr<ApfStage<T>>, 4> apf_;
  std::unique_ptr<Gfu<T>> gfu_;
  std::unique_ptr<SegHead<T>> head_;
};

}  // namespace s2fpn
