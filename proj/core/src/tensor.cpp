#include "s2fpn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>
#include <unordered_set>

namespace s2fpn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_seq{0};

void check_shape(const Shape& s) {
  if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
    throw DimensionError("negative dimension in shape " + s.str());
  }
}
}  // namespace

namespace detail {
std::uint64_t next_tape_seq() { return ++g_seq; }
}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = shape;
  impl->value.assign(static_cast<std::size_t>(shape.numel()), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape.str());
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = shape;
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full(Shape{1, 1, 1, 1}, value, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::meta(const Shape& shape) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = shape;
  impl->meta = true;
  return Tensor(std::move(impl));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  static const Shape kEmpty{};
  return impl_ ? impl_->shape : kEmpty;
}

template <typename T>
std::span<T> Tensor<T>::data() {
  if (!impl_) return {};
  return impl_->value;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) return {};
  return impl_->value;
}

template <typename T>
T& Tensor<T>::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  return impl_->value[static_cast<std::size_t>(impl_->shape.offset(n, c, h, w))];
}

template <typename T>
T Tensor<T>::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return impl_->value[static_cast<std::size_t>(impl_->shape.offset(n, c, h, w))];
}

template <typename T>
T Tensor<T>::item() const {
  if (!impl_ || impl_->value.size() != 1) {
    throw UsageError("item() requires a single-element tensor, got " + shape().str());
  }
  return impl_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (impl_) impl_->requires_grad = on;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (!impl_) return {};
  if (impl_->grad.empty()) return std::vector<T>(impl_->value.size(), T(0));
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
  if (!impl_) return {};
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  if (!impl_) return {};
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  impl->meta = impl_->meta;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

template <typename T>
void Tensor<T>::assign(std::span<const T> values) {
  if (!impl_ || values.size() != impl_->value.size()) {
    throw DimensionError("assign: size mismatch for shape " + shape().str());
  }
  std::copy(values.begin(), values.end(), impl_->value.begin());
}

template <typename T>
Tape<T> Tape<T>::collect(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<const detail::TensorImpl<T>*> stack;
  if (root.impl()) stack.push_back(root.impl().get());
  while (!stack.empty()) {
    const auto* impl = stack.back();
    stack.pop_back();
    const detail::Node<T>* node = impl->grad_fn.get();
    if (node == nullptr || !seen.insert(node).second) continue;
    tape.nodes_.push_back(node);
    for (const auto& in : node->inputs) {
      if (in && in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto* a, const auto* b) { return a->seq > b->seq; });
  return tape;
}

template <typename T>
void backward(const Tensor<T>& root, std::span<const T> seed) {
  if (!root.defined() || root.is_meta()) throw UsageError("backward on an undefined tensor");
  if (static_cast<std::int64_t>(seed.size()) != root.numel()) {
    throw UsageError("backward seed size does not match root shape " + root.shape().str());
  }
  auto* root_impl = root.impl().get();
  if (!root_impl->requires_grad) return;
  if (!root_impl->grad_fn) {
    // Leaf root: the gradient is the seed itself.
    if (root_impl->grad.empty()) root_impl->grad.assign(root_impl->value.size(), T(0));
    for (std::size_t i = 0; i < seed.size(); ++i) root_impl->grad[i] += seed[i];
    return;
  }

  const Tape<T> tape = Tape<T>::collect(root);
  std::unordered_map<const detail::TensorImpl<T>*, std::vector<T>> pending;
  pending[root_impl].assign(seed.begin(), seed.end());

  std::vector<std::vector<T>*> sinks;
  for (const detail::Node<T>* node : tape.nodes()) {
    auto it = pending.find(node->output);
    if (it == pending.end()) continue;
    std::vector<T> gout = std::move(it->second);
    pending.erase(it);

    sinks.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      auto* in = node->inputs[i].get();
      if (in == nullptr || !in->requires_grad) continue;
      std::vector<T>& buf = in->grad_fn ? pending[in] : in->grad;
      if (buf.empty()) buf.assign(in->value.size(), T(0));
      sinks[i] = &buf;
    }
    node->backward(gout, sinks);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + loss.shape().str());
  }
  const T one = T(1);
  backward(loss, std::span<const T>(&one, 1));
}

namespace detail {

template <typename T>
Tensor<T> make_result(const Shape& shape, std::vector<T> values,
                      const std::vector<const Tensor<T>*>& inputs, const char* name,
                      std::function<void(std::span<const T>, std::span<std::vector<T>*>)> bw) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->value = std::move(values);
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const auto* in : inputs) needs = needs || (in && in->requires_grad());
  }
  if (needs) {
    auto node = std::make_shared<Node<T>>();
    node->seq = next_tape_seq();
    node->name = name;
    node->output = impl.get();
    for (const auto* in : inputs) node->inputs.push_back(in ? in->impl() : nullptr);
    node->backward = std::move(bw);
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor<T>(std::move(impl));
}

template <typename T>
Tensor<T> make_result(const Shape& shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, const char* name,
                      std::function<void(std::span<const T>, std::span<std::vector<T>*>)> bw) {
  return make_result<T>(shape, std::move(values), std::vector<const Tensor<T>*>(inputs), name,
                        std::move(bw));
}

}  // namespace detail

#define S2FPN_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                    \
  template class Tape<T>;                                                                      \
  template void backward<T>(const Tensor<T>&);                                                 \
  template void backward<T>(const Tensor<T>&, std::span<const T>);                             \
  template Tensor<T> detail::make_result<T>(                                                   \
      const Shape&, std::vector<T>, const std::vector<const Tensor<T>*>&, const char*,         \
      std::function<void(std::span<const T>, std::span<std::vector<T>*>)>);                    \
  template Tensor<T> detail::make_result<T>(                                                   \
      const Shape&, std::vector<T>, std::initializer_list<const Tensor<T>*>, const char*,      \
      std::function<void(std::span<const T>, std::span<std::vector<T>*>)>);

S2FPN_INSTANTIATE(float)
S2FPN_INSTANTIATE(double)
#undef S2FPN_INSTANTIATE

}  // namespace s2fpn
