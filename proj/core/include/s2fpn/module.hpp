#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "s2fpn/checkpoint.hpp"
#include "s2fpn/ops.hpp"
#include "s2fpn/tensor.hpp"

namespace s2fpn {

/// A learnable tensor together with its dotted model path.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;  ///< requires_grad; its grad buffer is the accumulator
};

/// Outcome of applying a checkpoint to a module tree.
struct LoadReport {
  std::size_t loaded = 0;
  std::vector<std::string> missing;     ///< model tensors absent from the checkpoint
  std::vector<std::string> unexpected;  ///< checkpoint entries the model does not own
};

/// Base of every layer: owns named parameters, buffers and child modules.
///
/// Modules are neither copyable nor movable because parents register raw
/// pointers to their member children.
template <typename T>
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<Parameter<T>> named_parameters() const;
  std::vector<Parameter<T>> named_buffers() const;
  std::int64_t parameter_count() const;
  void zero_grad();

  /// This module followed by all of its descendants, depth first.
  std::vector<Module*> modules();

  /// Reseeds every stochastic layer in the tree (dropout) from `seed`.
  void reseed(std::uint64_t seed);

  /// Parameters and buffers as a checkpoint, named by model path.
  Checkpoint state() const;
  /// Loads every name-matched tensor. Shape disagreement throws LoadError.
  LoadReport load_state(const Checkpoint& ckpt);

 protected:
  Tensor<T> register_parameter(std::string name, Tensor<T> value);
  Tensor<T> register_buffer(std::string name, Tensor<T> value);
  void register_module(std::string name, Module& child);

  virtual void on_reseed(std::uint64_t /*seed*/) {}

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<Parameter<T>>& out) const;
  void reseed_impl(std::uint64_t seed, std::uint64_t& counter);

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

struct ConvSpec {
  std::int64_t in = 0;
  std::int64_t out = 0;
  int kernel = 1;
  int stride = 1;
  int padding = -1;  ///< -1: kernel / 2
  int groups = 1;
  bool bias = false;
};

/// Convolution layer with He-normal weight initialization.
template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(const ConvSpec& spec, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  const ConvSpec& spec() const { return spec_; }
  Tensor<T> weight;
  Tensor<T> bias;  ///< undefined when spec.bias is false

 private:
  ConvSpec spec_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5);
  Tensor<T> forward(const Tensor<T>& x);

  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum;
  double eps;
  /// Running variance uses the unbiased batch estimate when true.
  bool unbiased_running_var = true;
};

/// Conv (no bias) -> BatchNorm -> optional ReLU.
template <typename T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct(const ConvSpec& spec, std::mt19937_64& rng, bool relu = true);
  Tensor<T> forward(const Tensor<T>& x);

  Conv2d<T> conv;
  BatchNorm2d<T> bn;

 private:
  bool relu_;
};

template <typename T>
class Dropout : public Module<T> {
 public:
  explicit Dropout(double p);
  Tensor<T> forward(const Tensor<T>& x);
  double p() const { return p_; }

 protected:
  void on_reseed(std::uint64_t seed) override { rng_.seed(seed); }

 private:
  double p_;
  std::mt19937_64 rng_;
};

}  // namespace s2fpn
