#include "s2fpn/module.hpp"

#include <cmath>
#include <unordered_set>

#include "s2fpn/random.hpp"

namespace s2fpn {

template <typename T>
void Module<T>::train(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->train(on);
}

template <typename T>
void Module<T>::collect(const std::string& prefix, bool buffers,
                        std::vector<Parameter<T>>& out) const {
  for (const auto& [name, t] : buffers ? buffers_ : params_) out.push_back({prefix + name, t});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out);
}

template <typename T>
std::vector<Parameter<T>> Module<T>::named_parameters() const {
  std::vector<Parameter<T>> out;
  collect("", false, out);
  return out;
}

template <typename T>
std::vector<Parameter<T>> Module<T>::named_buffers() const {
  std::vector<Parameter<T>> out;
  collect("", true, out);
  return out;
}

template <typename T>
std::int64_t Module<T>::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : named_parameters()) total += p.value.numel();
  return total;
}

template <typename T>
void Module<T>::zero_grad() {
  for (auto& p : named_parameters()) p.value.zero_grad();
}

template <typename T>
std::vector<Module<T>*> Module<T>::modules() {
  std::vector<Module*> out{this};
  for (auto& [name, child] : children_) {
    auto sub = child->modules();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

template <typename T>
void Module<T>::reseed_impl(std::uint64_t seed, std::uint64_t& counter) {
  on_reseed(derive_seed(seed, counter++));
  for (auto& [name, child] : children_) child->reseed_impl(seed, counter);
}

template <typename T>
void Module<T>::reseed(std::uint64_t seed) {
  std::uint64_t counter = 0;
  reseed_impl(seed, counter);
}

template <typename T>
Checkpoint Module<T>::state() const {
  Checkpoint ckpt;
  for (const auto& p : named_parameters()) ckpt.add(p.name, p.value);
  for (const auto& b : named_buffers()) ckpt.add(b.name, b.value);
  return ckpt;
}

template <typename T>
LoadReport Module<T>::load_state(const Checkpoint& ckpt) {
  LoadReport report;
  std::unordered_set<std::string> owned;
  auto apply = [&](std::vector<Parameter<T>> tensors) {
    for (auto& p : tensors) {
      owned.insert(p.name);
      const CheckpointEntry* e = ckpt.find(p.name);
      if (e == nullptr) {
        report.missing.push_back(p.name);
        continue;
      }
      if (e->shape != p.value.shape()) {
        throw LoadError("shape mismatch for '" + p.name + "': checkpoint " + e->shape.str() +
                        ", model " + p.value.shape().str());
      }
      const std::vector<T> values = e->template as<T>();
      p.value.assign(values);
      ++report.loaded;
    }
  };
  apply(named_parameters());
  apply(named_buffers());
  for (const auto& e : ckpt.entries()) {
    if (!owned.contains(e.name)) report.unexpected.push_back(e.name);
  }
  return report;
}

template <typename T>
Tensor<T> Module<T>::register_parameter(std::string name, Tensor<T> value) {
  value.set_requires_grad(true);
  params_.emplace_back(std::move(name), value);
  return value;
}

template <typename T>
Tensor<T> Module<T>::register_buffer(std::string name, Tensor<T> value) {
  buffers_.emplace_back(std::move(name), value);
  return value;
}

template <typename T>
void Module<T>::register_module(std::string name, Module& child) {
  children_.emplace_back(std::move(name), &child);
}

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  if (spec_.padding < 0) spec_.padding = spec_.kernel / 2;
  if (spec_.groups < 1 || spec_.in % spec_.groups != 0 || spec_.out % spec_.groups != 0) {
    throw ConfigError("conv: groups=" + std::to_string(spec_.groups) +
                      " must divide in=" + std::to_string(spec_.in) +
                      " and out=" + std::to_string(spec_.out));
  }
  const Shape ws{spec_.out, spec_.in / spec_.groups, spec_.kernel, spec_.kernel};
  std::vector<T> w(static_cast<std::size_t>(ws.numel()));
  const double fan_in = static_cast<double>(ws.c * ws.h * ws.w);
  const double stddev = std::sqrt(2.0 / fan_in);
  for (T& v : w) v = static_cast<T>(stddev * normal01(rng));
  weight = this->register_parameter("weight", Tensor<T>::from(ws, std::move(w)));
  if (spec_.bias) {
    bias = this->register_parameter("bias", Tensor<T>::zeros(Shape{spec_.out, 1, 1, 1}));
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, bias, spec_.stride, spec_.padding, spec_.groups);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, double momentum_, double eps_)
    : momentum(momentum_), eps(eps_) {
  const Shape s{channels, 1, 1, 1};
  weight = this->register_parameter("weight", Tensor<T>::full(s, T(1)));
  bias = this->register_parameter("bias", Tensor<T>::zeros(s));
  running_mean = this->register_buffer("running_mean", Tensor<T>::zeros(s));
  running_var = this->register_buffer("running_var", Tensor<T>::full(s, T(1)));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  return ops::batch_norm(x, weight, bias, running_mean, running_var, this->is_training(), momentum,
                         eps, unbiased_running_var);
}

template <typename T>
ConvBnAct<T>::ConvBnAct(const ConvSpec& spec, std::mt19937_64& rng, bool relu)
    : conv(ConvSpec{spec.in, spec.out, spec.kernel, spec.stride, spec.padding, spec.groups, false},
           rng),
      bn(spec.out),
      relu_(relu) {
  this->register_module("conv", conv);
  this->register_module("bn", bn);
}

template <typename T>
Tensor<T> ConvBnAct<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = bn.forward(conv.forward(x));
  return relu_ ? ops::relu(y) : y;
}

template <typename T>
Dropout<T>::Dropout(double p) : p_(p), rng_(0) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must satisfy 0 <= p < 1");
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x) {
  return ops::dropout(x, p_, this->is_training(), rng_);
}

template class Module<float>;
template class Module<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class ConvBnAct<float>;
template class ConvBnAct<double>;
template class Dropout<float>;
template class Dropout<double>;

}  // namespace s2fpn
