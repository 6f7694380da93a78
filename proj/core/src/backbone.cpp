#include "s2fpn/backbone.hpp"

#include <algorithm>
#include <cctype>

namespace s2fpn {

std::string to_string(BackboneVariant v) {
  switch (v) {
    case BackboneVariant::kR18:
      return "resnet18";
    case BackboneVariant::kR34:
      return "resnet34";
    case BackboneVariant::kR34M:
      return "resnet34m";
  }
  return "unknown";
}

BackboneVariant parse_backbone(const std::string& name) {
  std::string key = name;
  std::transform(key.begin(), key.end(), key.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (key == "resnet18" || key == "r18") return BackboneVariant::kR18;
  if (key == "resnet34" || key == "r34") return BackboneVariant::kR34;
  if (key == "resnet34m" || key == "r34m") return BackboneVariant::kR34M;
  throw ConfigError("unknown backbone variant '" + name + "' (expected resnet18, resnet34, resnet34m)");
}

template <typename T>
ShortcutProjection<T>::ShortcutProjection(std::int64_t in, std::int64_t out, int stride,
                                          std::mt19937_64& rng)
    : conv(ConvSpec{in, out, 1, stride, 0, 1, false}, rng), bn(out) {
  this->register_module("0", conv);
  this->register_module("1", bn);
}

template <typename T>
BasicBlock<T>::BasicBlock(std::int64_t in, std::int64_t out, int stride, std::mt19937_64& rng)
    : conv1_(ConvSpec{in, out, 3, stride, 1, 1, false}, rng),
      bn1_(out),
      conv2_(ConvSpec{out, out, 3, 1, 1, 1, false}, rng),
      bn2_(out) {
  this->register_module("conv1", conv1_);
  this->register_module("bn1", bn1_);
  this->register_module("conv2", conv2_);
  this->register_module("bn2", bn2_);
  if (stride != 1 || in != out) {
    downsample_ = std::make_unique<ShortcutProjection<T>>(in, out, stride, rng);
    this->register_module("downsample", *downsample_);
  }
}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = ops::relu(bn1_.forward(conv1_.forward(x)));
  y = bn2_.forward(conv2_.forward(y));
  const Tensor<T> shortcut = downsample_ ? downsample_->forward(x) : x;
  return ops::relu(ops::add(y, shortcut));
}

template <typename T>
ResStage<T>::ResStage(std::int64_t in, std::int64_t out, int blocks, int stride,
                      std::mt19937_64& rng) {
  for (int i = 0; i < blocks; ++i) {
    blocks_.push_back(std::make_unique<BasicBlock<T>>(i == 0 ? in : out, out, i == 0 ? stride : 1, rng));
    this->register_module(std::to_string(i), *blocks_.back());
  }
}

template <typename T>
Tensor<T> ResStage<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& b : blocks_) y = b->forward(y);
  return y;
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg), conv1_(ConvSpec{cfg.in_channels, 64, 7, 2, 3, 1, false}, rng), bn1_(64) {
  if (cfg_.in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
  if (cfg_.variant != BackboneVariant::kR34M) {
    cfg_.dense_stage = DenseStage::kNone;
  } else if (cfg_.dense_stage == DenseStage::kNone) {
    cfg_.dense_stage = DenseStage::kPool;
  }
  pool_stride_ = cfg_.dense_stage == DenseStage::kPool ? 1 : 2;
  const int layer2_stride = cfg_.dense_stage == DenseStage::kLayer2 ? 1 : 2;
  const auto counts = block_counts();

  this->register_module("conv1", conv1_);
  this->register_module("bn1", bn1_);
  layer1_ = std::make_unique<ResStage<T>>(64, 64, counts[0], 1, rng);
  layer2_ = std::make_unique<ResStage<T>>(64, 128, counts[1], layer2_stride, rng);
  layer3_ = std::make_unique<ResStage<T>>(128, 256, counts[2], 2, rng);
  layer4_ = std::make_unique<ResStage<T>>(256, 512, counts[3], 2, rng);
  this->register_module("layer1", *layer1_);
  this->register_module("layer2", *layer2_);
  this->register_module("layer3", *layer3_);
  this->register_module("layer4", *layer4_);
}

template <typename T>
std::array<int, 4> Backbone<T>::block_counts() const {
  if (cfg_.variant == BackboneVariant::kR18) return {2, 2, 2, 2};
  return {3, 4, 6, 3};
}

template <typename T>
std::array<int, 5> Backbone<T>::strides() const {
  std::array<int, 5> s{2, 4, 8, 16, 32};
  if (cfg_.dense_stage == DenseStage::kPool) s = {2, 2, 4, 8, 16};
  if (cfg_.dense_stage == DenseStage::kLayer2) s = {2, 4, 4, 8, 16};
  return s;
}

template <typename T>
FeatureHierarchy<T> Backbone<T>::forward(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.c != cfg_.in_channels) {
    throw DimensionError("backbone: expected " + std::to_string(cfg_.in_channels) +
                         " input channels, got " + xs.str());
  }
  const int multiple = input_multiple();
  if (xs.h % multiple != 0 || xs.w % multiple != 0 || xs.h == 0 || xs.w == 0) {
    throw DimensionError("backbone " + to_string(cfg_.variant) + ": input height and width must be divisible by " +
                         std::to_string(multiple) + ", got " + std::to_string(xs.h) + "x" +
                         std::to_string(xs.w));
  }
  FeatureHierarchy<T> f;
  f.levels[0] = ops::relu(bn1_.forward(conv1_.forward(x)));
  f.levels[1] = layer1_->forward(ops::max_pool(f.levels[0], 3, pool_stride_, 1));
  f.levels[2] = layer2_->forward(f.levels[1]);
  f.levels[3] = layer3_->forward(f.levels[2]);
  f.levels[4] = layer4_->forward(f.levels[3]);
  return f;
}

template <typename T>
LoadReport import_weights(Backbone<T>& backbone, const std::filesystem::path& path) {
  return backbone.load_state(Checkpoint::load(path));
}

template class ShortcutProjection<float>;
template class ShortcutProjection<double>;
template class BasicBlock<float>;
template class BasicBlock<double>;
template class ResStage<float>;
template class ResStage<double>;
template class Backbone<float>;
template class Backbone<double>;
template LoadReport import_weights<float>(Backbone<float>&, const std::filesystem::path&);
template LoadReport import_weights<double>(Backbone<double>&, const std::filesystem::path&);

}  // namespace s2fpn
