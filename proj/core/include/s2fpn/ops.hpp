#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "s2fpn/tensor.hpp"

namespace s2fpn {

enum class PoolMode { kAvg, kMax };
enum class Axis { kC = 1, kH = 2, kW = 3 };

/// Per-element FLOP weights used for the non-convolution kernels in the cost
/// report. Convolutions count 2 FLOPs per multiply-accumulate plus one add per
/// output element when a bias is present.
namespace flop_cost {
inline constexpr std::int64_t kBatchNorm = 2;
inline constexpr std::int64_t kRelu = 1;
inline constexpr std::int64_t kSigmoid = 4;
inline constexpr std::int64_t kElementwise = 1;
inline constexpr std::int64_t kSoftmax = 3;
inline constexpr std::int64_t kBilinear = 8;
inline constexpr std::int64_t kDropout = 1;
}  // namespace flop_cost

namespace ops {

/// 2-D cross-correlation. `weight` is (outC, inC/groups, kH, kW); `bias`
/// may be undefined or hold outC values (any 4-D shape with outC elements).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0, int groups = 1);

/// Batch normalization over (N, H, W). In training mode batch statistics are
/// used and the running estimates are updated in place with `momentum`;
/// evaluation mode requires defined running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5, bool unbiased_running_var = true);

/// Row-wise reduction along W: (N,C,H,W) -> (N,C,H,1).
template <typename T>
Tensor<T> strip_pool(const Tensor<T>& x, PoolMode mode);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Bilinear resize with half-pixel source mapping (align_corners = false).
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Axis axis);

/// Broadcasting element-wise ops: every dim must match or be 1 on one side.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// Multiply by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Broadcast result shape; throws DimensionError naming the first bad axis.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Inverted dropout: scales kept values by 1/(1-p) in training, identity otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng);

template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int kernel, int stride, int padding);

/// Channel-wise concatenation.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Output spatial extent of a strided window op.
std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, int padding);

}  // namespace ops
}  // namespace s2fpn
