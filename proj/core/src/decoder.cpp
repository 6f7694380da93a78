#include "s2fpn/decoder.hpp"

#include "s2fpn/cost.hpp"

namespace s2fpn {

namespace {

// Runs `f` and prefixes any dimension/config error with the module path.
template <typename F>
auto in_module(const std::string& name, F&& f) {
  CostScope scope(name);
  try {
    return f();
  } catch (const DimensionError& e) {
    throw DimensionError(name + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

}  // namespace

template <typename T>
Gfu<T>::Gfu(std::int64_t encoder_channels, std::int64_t width, std::mt19937_64& rng, bool literal)
    : pre_conv(ConvSpec{encoder_channels, width, 1, 1, 0, 1, true}, rng),
      ctx_conv(ConvSpec{width, width, 1, 1, 0, 1, true}, rng),
      encoder_channels_(encoder_channels),
      width_(width) {
  this->register_module("pre_conv", pre_conv);
  this->register_module("ctx_conv", ctx_conv);
  const ConvSpec one{width, width, 1, 1, 0, 1, false};
  if (literal) {
    apf_plain_.emplace(ConvSpec{width, width, 1, 1, 0, 1, true}, rng);
    out_plain_.emplace(ConvSpec{width, width, 1, 1, 0, 1, true}, rng);
    this->register_module("apf_conv", *apf_plain_);
    this->register_module("out_conv", *out_plain_);
  } else {
    apf_conv_.emplace(one, rng);
    out_conv_.emplace(one, rng);
    this->register_module("apf_conv", *apf_conv_);
    this->register_module("out_conv", *out_conv_);
  }
}

template <typename T>
Tensor<T> Gfu<T>::apf_branch(const Tensor<T>& x) {
  return apf_conv_ ? apf_conv_->forward(x) : apf_plain_->forward(x);
}

template <typename T>
Tensor<T> Gfu<T>::out_branch(const Tensor<T>& x) {
  return out_conv_ ? out_conv_->forward(x) : out_plain_->forward(x);
}

template <typename T>
GfuTrace<T> Gfu<T>::trace(const Tensor<T>& encoder, const Tensor<T>& pyramid) {
  if (encoder.shape().c != encoder_channels_ || pyramid.shape().c != width_) {
    throw ConfigError("gfu: expected channels (" + std::to_string(encoder_channels_) + ", " +
                      std::to_string(width_) + "), got " + encoder.shape().str() + " and " +
                      pyramid.shape().str());
  }
  const Shape ps = pyramid.shape();
  GfuTrace<T> t;
  t.upsampled = ops::bilinear_upsample(encoder, ps.h, ps.w);
  t.pre = pre_conv.forward(ops::relu(t.upsampled));
  t.context = ctx_conv.forward(ops::global_avg_pool(t.pre));
  t.apf = apf_branch(pyramid);
  t.fused = ops::add(t.apf, t.context);
  t.output = out_branch(t.fused);
  return t;
}

template <typename T>
SegHead<T>::SegHead(std::int64_t width, std::int64_t num_classes, std::mt19937_64& rng)
    : classifier(ConvSpec{width, num_classes, 1, 1, 0, 1, true}, rng) {
  this->register_module("classifier", classifier);
}

template <typename T>
Tensor<T> SegHead<T>::forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  return ops::bilinear_upsample(classifier.forward(x), out_h, out_w);
}

template <typename T>
S2Fpn<T>::S2Fpn(const ModelConfig& cfg) : cfg_(cfg), init_rng_(cfg.seed) {
  if (cfg_.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  for (const auto w : cfg_.widths) {
    if (w < 1) throw ConfigError("pyramid widths must be >= 1");
  }
  auto& rng = init_rng_;
  const auto& ch = Backbone<T>::kChannels;
  const auto& w = cfg_.widths;  // APF2..APF5

  backbone_ = std::make_unique<Backbone<T>>(cfg_.backbone, rng);
  cfgb_ = std::make_unique<Cfgb<T>>(ch[4], w[3], rng);
  fab_ = std::make_unique<Fab<T>>(ch[4], w[0], rng);
  for (int level = 5; level >= 2; --level) {
    ApfSpec spec;
    spec.level = level;
    spec.low_channels = ch[static_cast<std::size_t>(level - 1)];
    spec.coarse_channels = level == 5 ? w[3] : w[static_cast<std::size_t>(level - 1)];
    spec.width = w[static_cast<std::size_t>(level - 2)];
    spec.num_classes = cfg_.num_classes;
    spec.dropout = cfg_.head_dropout;
    spec.cam_reduction = cfg_.cam_reduction;
    spec.literal_ssam = cfg_.literal_ssam;
    apf_[static_cast<std::size_t>(level - 2)] = std::make_unique<ApfStage<T>>(spec, rng);
  }
  gfu_ = std::make_unique<Gfu<T>>(w[0], w[0], rng, cfg_.literal_gfu);
  head_ = std::make_unique<SegHead<T>>(w[0], cfg_.num_classes, rng);

  this->register_module("backbone", *backbone_);
  this->register_module("cfgb", *cfgb_);
  this->register_module("fab", *fab_);
  for (int level = 5; level >= 2; --level) {
    this->register_module("apf." + std::to_string(level), apf(level));
  }
  this->register_module("gfu", *gfu_);
  this->register_module("head", *head_);
}

template <typename T>
std::array<int, 4> S2Fpn<T>::pyramid_strides() const {
  const auto s = backbone_->strides();
  return {s[1], s[2], s[3], s[4]};
}

template <typename T>
ModelOutput<T> S2Fpn<T>::forward(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const FeatureHierarchy<T> f = in_module("backbone", [&] { return backbone_->forward(x); });
  const Tensor<T> coarse = in_module("cfgb", [&] { return cfgb_->forward(f[4]); });
  const Tensor<T> adapted = in_module("fab", [&] { return fab_->forward(f[4]); });

  ModelOutput<T> out;
  Tensor<T> current = coarse;
  for (int level = 5; level >= 2; --level) {
    auto [next, aux] = in_module("apf." + std::to_string(level),
                                 [&] { return apf(level).forward(current, f[level - 1]); });
    current = next;
    out.aux[static_cast<std::size_t>(level - 2)] = aux;
  }
  const Tensor<T> decoded = in_module("gfu", [&] { return gfu_->forward(adapted, current); });
  out.main = in_module("head", [&] { return head_->forward(decoded, xs.h, xs.w); });
  return out;
}

template class Gfu<float>;
template class Gfu<double>;
template class SegHead<float>;
template class SegHead<double>;
template class S2Fpn<float>;
template class S2Fpn<double>;

}  // namespace s2fpn
