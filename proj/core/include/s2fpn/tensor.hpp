#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "s2fpn/error.hpp"

namespace s2fpn {

/// Shape of a dense 4-D tensor in (batch, channel, height, width) order.
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  constexpr std::int64_t numel() const { return n * c * h * w; }
  constexpr std::int64_t operator[](int axis) const {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }
  constexpr std::array<std::int64_t, 4> dims() const { return {n, c, h, w}; }
  constexpr std::int64_t offset(std::int64_t in, std::int64_t ic, std::int64_t ih,
                                std::int64_t iw) const {
    return ((in * c + ic) * h + ih) * w + iw;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const;
};

namespace detail {

template <typename T>
struct TensorImpl;

/// One recorded differentiable operation.
///
/// `backward` receives the gradient of the op output and one (possibly null)
/// gradient buffer per input; it must accumulate into the non-null buffers.
template <typename T>
struct Node {
  std::uint64_t seq = 0;
  std::string name;
  const TensorImpl<T>* output = nullptr;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T>, std::span<std::vector<T>*>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool meta = false;
  std::shared_ptr<Node<T>> grad_fn;
};

std::uint64_t next_tape_seq();

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Dense row-major NCHW tensor with optional gradient tracking.
///
/// Tensor is a shared handle: copies alias the same storage, like most
/// deep-learning frameworks. Use clone() for a deep copy. A "meta" tensor
/// carries a shape but no storage; kernels given meta inputs only propagate
/// shapes and report their cost, which is how FLOP accounting runs without
/// executing the network.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor meta(const Shape& shape);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const { return shape().numel(); }
  bool is_meta() const { return impl_ && impl_->meta; }

  std::span<T> data();
  std::span<const T> data() const;
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  /// Accumulated gradient; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> grad_buffer();
  void zero_grad();

  /// Deep copy without graph history.
  Tensor clone() const;
  /// Same storage view detached from the graph is not supported; returns a copy.
  Tensor detach() const { return clone(); }
  /// Replace values in place; shape must agree. Does not touch the graph.
  void assign(std::span<const T> values);

  /// Node that produced this tensor, if it was recorded.
  const detail::Node<T>* grad_fn() const { return impl_ ? impl_->grad_fn.get() : nullptr; }

  // Internal: used by kernels to build graph edges.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Reverse-ordered record of the operations reachable from a scalar loss.
template <typename T>
class Tape {
 public:
  /// Collects every recorded op reachable from `root`, newest first.
  static Tape collect(const Tensor<T>& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<const detail::Node<T>*>& nodes() const { return nodes_; }

 private:
  std::vector<const detail::Node<T>*> nodes_;
};

/// Replays the tape of `loss` in reverse, accumulating into every leaf tensor
/// that requires grad. Calling it twice doubles the accumulated gradients.
template <typename T>
void backward(const Tensor<T>& loss);

/// Same as backward(loss) but seeds the output gradient explicitly, which is
/// allowed for non-scalar roots.
template <typename T>
void backward(const Tensor<T>& root, std::span<const T> seed);

namespace detail {

/// Creates the output tensor of an op and, when needed, attaches its node.
/// Returns the tensor; `node` is left null when no input requires grad.
template <typename T>
Tensor<T> make_result(const Shape& shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, const char* name,
                      std::function<void(std::span<const T>, std::span<std::vector<T>*>)> bw);

template <typename T>
Tensor<T> make_result(const Shape& shape, std::vector<T> values,
                      const std::vector<const Tensor<T>*>& inputs, const char* name,
                      std::function<void(std::span<const T>, std::span<std::vector<T>*>)> bw);

}  // namespace detail

}  // namespace s2fpn
