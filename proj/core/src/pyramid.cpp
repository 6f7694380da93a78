#include "s2fpn/pyramid.hpp"

#include "s2fpn/cost.hpp"

namespace s2fpn {

template <typename T>
DepthwiseProjection<T>::DepthwiseProjection(std::int64_t in, std::int64_t out, int stride,
                                            std::mt19937_64& rng)
    : depthwise(ConvSpec{in, in, 3, stride, 1, static_cast<int>(in), false}, rng),
      pointwise(ConvSpec{in, out, 1, 1, 0, 1, false}, rng),
      stride_(stride) {
  this->register_module("depthwise", depthwise);
  this->register_module("pointwise", pointwise);
}

template <typename T>
Tensor<T> DepthwiseProjection<T>::forward(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (stride_ > 1 && (s.h < 2 || s.w < 2)) {
    throw DimensionError("coarse generator needs spatial dims >= 2, got " + s.str());
  }
  return pointwise.forward(depthwise.forward(x));
}

template <typename T>
Frb<T>::Frb(std::int64_t in, std::int64_t out, std::mt19937_64& rng)
    : conv1(ConvSpec{in, out, 1, 1, 0, 1, false}, rng),
      conv3(ConvSpec{out, out, 3, 1, 1, 1, false}, rng) {
  this->register_module("conv1", conv1);
  this->register_module("conv3", conv3);
}

template <typename T>
Tensor<T> Frb<T>::forward(const Tensor<T>& x) {
  return conv3.forward(conv1.forward(x));
}

template <typename T>
AuxHead<T>::AuxHead(std::int64_t width, std::int64_t num_classes, double dropout,
                    std::mt19937_64& rng)
    : conv(ConvSpec{width, width, 3, 1, 1, 1, false}, rng),
      drop(dropout),
      classifier(ConvSpec{width, num_classes, 1, 1, 0, 1, true}, rng) {
  this->register_module("conv", conv);
  this->register_module("drop", drop);
  this->register_module("classifier", classifier);
}

template <typename T>
Tensor<T> AuxHead<T>::forward(const Tensor<T>& x) {
  return classifier.forward(drop.forward(conv.forward(x)));
}

template <typename T>
ApfStage<T>::ApfStage(const ApfSpec& spec, std::mt19937_64& rng)
    : lateral(ConvSpec{spec.low_channels, spec.width, 1, 1, 0, 1, false}, rng),
      coarse_proj(ConvSpec{spec.coarse_channels, spec.width, 1, 1, 0, 1, false}, rng),
      frb(2 * spec.width, spec.width, rng),
      crb_conv(ConvSpec{spec.width, spec.width, 3, 1, 1, 1, false}, rng),
      coarse_conv(ConvSpec{spec.width, spec.width, 3, 1, 1, 1, true}, rng),
      cam(spec.width, rng, spec.cam_reduction),
      ssam(spec.width, rng, spec.literal_ssam),
      head(spec.width, spec.num_classes, spec.dropout, rng),
      next_refine(ConvSpec{spec.width, spec.width, 3, 1, 1, 1, false}, rng),
      spec_(spec) {
  this->register_module("lateral", lateral);
  this->register_module("coarse_proj", coarse_proj);
  this->register_module("frb", frb);
  this->register_module("crb_conv", crb_conv);
  this->register_module("coarse_conv", coarse_conv);
  this->register_module("cam", cam);
  this->register_module("ssam", ssam);
  this->register_module("head", head);
  this->register_module("next_refine", next_refine);
}

template <typename T>
ApfTrace<T> ApfStage<T>::trace(const Tensor<T>& coarse_in, const Tensor<T>& low) {
  const Shape ls = low.shape();
  const Shape cs = coarse_in.shape();
  if (cs.n != ls.n) {
    throw DimensionError("apf." + std::to_string(spec_.level) + ": batch mismatch " + cs.str() +
                         " vs " + ls.str());
  }
  if (cs.h > ls.h || cs.w > ls.w) {
    throw DimensionError("apf." + std::to_string(spec_.level) + ": coarse input " + cs.str() +
                         " is larger than the low-level input " + ls.str());
  }
  ApfTrace<T> t;
  t.lateral = lateral.forward(low);
  t.up = coarse_proj.forward(ops::bilinear_upsample(coarse_in, ls.h, ls.w));
  if (t.up.shape().h != t.lateral.shape().h || t.up.shape().w != t.lateral.shape().w) {
    throw DimensionError("apf." + std::to_string(spec_.level) + ": upsampled coarse " +
                         t.up.shape().str() + " does not match lateral " + t.lateral.shape().str());
  }
  t.concat = ops::concat_channels<T>({t.up, t.lateral});
  t.refined = frb.forward(t.concat);

  t.crb = crb_conv.forward(t.lateral);
  t.channel_gate = cam.forward(t.refined);
  t.x_a = ops::mul(t.crb, t.channel_gate);

  t.coarse = coarse_conv.forward(t.up);
  t.ssam = ssam.trace(t.refined);
  t.x_b = ops::mul(t.coarse, t.ssam.output);

  t.fused = ops::add(t.x_a, t.x_b);
  if (this->is_training() || force_aux) {
    CostScope scope("aux");
    t.aux = head.forward(t.fused);
  }
  t.out = next_refine.forward(t.fused);
  return t;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ApfStage<T>::forward(const Tensor<T>& coarse_in,
                                                     const Tensor<T>& low) {
  ApfTrace<T> t = trace(coarse_in, low);
  return {t.out, t.aux};
}

template class DepthwiseProjection<float>;
template class DepthwiseProjection<double>;
template class Frb<float>;
template class Frb<double>;
template class AuxHead<float>;
template class AuxHead<double>;
template class ApfStage<float>;
template class ApfStage<double>;

}  // namespace s2fpn
