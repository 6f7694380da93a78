#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "s2fpn/module.hpp"

namespace s2fpn {

enum class BackboneVariant { kR18, kR34, kR34M };

std::string to_string(BackboneVariant v);
/// Accepts "resnet18"/"r18", "resnet34"/"r34", "resnet34m"/"r34m" (case-insensitive).
BackboneVariant parse_backbone(const std::string& name);

/// Which stride-2 operation the modified ResNet-34 turns into stride 1.
enum class DenseStage {
  kNone,
  kPool,    ///< the 3x3 max-pool that opens the conv2_x stage (default for R34M)
  kLayer2,  ///< the first block of the second residual stage
};

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::kR18;
  std::int64_t in_channels = 3;
  /// Only consulted for kR34M; kNone there selects the default (kPool).
  DenseStage dense_stage = DenseStage::kNone;
};

/// Backbone taps F1..F5 (index 0..4).
template <typename T>
struct FeatureHierarchy {
  std::array<Tensor<T>, 5> levels;
  const Tensor<T>& operator[](int i) const { return levels[static_cast<std::size_t>(i)]; }
};

/// 1x1 conv + BN shortcut used when a block changes stride or width.
template <typename T>
class ShortcutProjection : public Module<T> {
 public:
  ShortcutProjection(std::int64_t in, std::int64_t out, int stride, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) { return bn.forward(conv.forward(x)); }

  Conv2d<T> conv;
  BatchNorm2d<T> bn;
};

/// ResNet basic residual block (two 3x3 convs). Parameter names follow the
/// torchvision layout: conv1, bn1, conv2, bn2, downsample.0, downsample.1.
template <typename T>
class BasicBlock : public Module<T> {
 public:
  BasicBlock(std::int64_t in, std::int64_t out, int stride, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);

  bool has_projection() const { return downsample_ != nullptr; }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  std::unique_ptr<ShortcutProjection<T>> downsample_;
};

/// Sequence of residual blocks registered as "0", "1", ...
template <typename T>
class ResStage : public Module<T> {
 public:
  ResStage(std::int64_t in, std::int64_t out, int blocks, int stride, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x);
  std::size_t size() const { return blocks_.size(); }

 private:
  std::vector<std::unique_ptr<BasicBlock<T>>> blocks_;
};

/// ResNet-18/34 feature extractor without the classification head.
template <typename T>
class Backbone : public Module<T> {
 public:
  Backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

  FeatureHierarchy<T> forward(const Tensor<T>& x);

  const BackboneConfig& config() const { return cfg_; }
  /// Output stride of F1..F5.
  std::array<int, 5> strides() const;
  /// Required divisibility of the input height and width.
  int input_multiple() const { return strides()[4]; }
  std::array<int, 4> block_counts() const;
  static constexpr std::array<std::int64_t, 5> kChannels{64, 64, 128, 256, 512};

 private:
  BackboneConfig cfg_;
  int pool_stride_ = 2;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  std::unique_ptr<ResStage<T>> layer1_;
  std::unique_ptr<ResStage<T>> layer2_;
  std::unique_ptr<ResStage<T>> layer3_;
  std::unique_ptr<ResStage<T>> layer4_;
};

/// Loads name-matched tensors (torchvision naming) from a checkpoint file.
template <typename T>
LoadReport import_weights(Backbone<T>& backbone, const std::filesystem::path& path);

}  // namespace s2fpn
