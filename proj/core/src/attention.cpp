#include "s2fpn/attention.hpp"

namespace s2fpn {

namespace {

std::int64_t checked_reduced(std::int64_t channels, std::int64_t reduction) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("cam: channels " + std::to_string(channels) +
                      " not divisible by reduction " + std::to_string(reduction));
  }
  return channels / reduction;
}

}  // namespace

template <typename T>
Ssam<T>::Ssam(std::int64_t channels, std::mt19937_64& rng, bool literal_scale)
    : shared_conv(ConvSpec{channels, channels, 1, 1, 0, 1, true}, rng),
      channels_(channels),
      literal_scale_(literal_scale) {
  this->register_module("shared_conv", shared_conv);
  alpha = this->register_parameter("alpha", Tensor<T>::zeros(Shape{1, 1, 1, 1}));
}

template <typename T>
SsamTrace<T> Ssam<T>::trace(const Tensor<T>& x) {
  if (x.shape().c != channels_) {
    throw ConfigError("ssam: expected " + std::to_string(channels_) + " channels, got " +
                      x.shape().str());
  }
  SsamTrace<T> t;
  t.z_avg = ops::strip_pool(x, PoolMode::kAvg);
  t.z_max = ops::strip_pool(x, PoolMode::kMax);
  t.f1 = shared_conv.forward(t.z_avg);
  t.f2 = shared_conv.forward(t.z_max);
  t.attention = ops::softmax(ops::mul(t.f1, t.f2), Axis::kH);
  const Tensor<T> first = ops::mul(t.attention, literal_scale_ ? t.f2 : t.f1);
  t.f_scale = ops::add(first, ops::mul(t.attention, t.f2));
  const Tensor<T> one = Tensor<T>::scalar(T(1));
  t.output = ops::add(ops::mul(alpha, t.f_scale), ops::mul(ops::sub(one, alpha), x));
  return t;
}

template <typename T>
Cam<T>::Cam(std::int64_t channels, std::mt19937_64& rng, std::int64_t reduction)
    : squeeze_conv(ConvSpec{channels, checked_reduced(channels, reduction), 1, 1, 0, 1, true}, rng),
      excite_conv(ConvSpec{channels / reduction, channels, 1, 1, 0, 1, true}, rng),
      channels_(channels) {
  this->register_module("squeeze_conv", squeeze_conv);
  this->register_module("excite_conv", excite_conv);
}

template <typename T>
Tensor<T> Cam<T>::forward(const Tensor<T>& x) {
  if (x.shape().c != channels_) {
    throw ConfigError("cam: expected " + std::to_string(channels_) + " channels, got " +
                      x.shape().str());
  }
  const Tensor<T> pooled = ops::global_avg_pool(x);
  return ops::sigmoid(excite_conv.forward(ops::relu(squeeze_conv.forward(pooled))));
}

template class Ssam<float>;
template class Ssam<double>;
template class Cam<float>;
template class Cam<double>;

}  // namespace s2fpn
