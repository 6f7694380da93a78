#include "s2fpn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "s2fpn/cost.hpp"

namespace s2fpn {
namespace ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using Backward = std::function<void(std::span<const T>, std::span<std::vector<T>*>)>;

template <typename T>
void check_finite([[maybe_unused]] const std::vector<T>& v, [[maybe_unused]] const char* op) {
#ifdef S2FPN_DEBUG_FINITE
  for (const T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite output from ") + op);
  }
#endif
}

template <typename T>
void require_defined(const Tensor<T>& x, const char* op) {
  if (!x.defined()) throw UsageError(std::string(op) + ": undefined input tensor");
}

template <typename T>
Tensor<T> finish(const Shape& shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs, const char* name, Backward<T> bw) {
  check_finite(values, name);
  return detail::make_result<T>(shape, std::move(values), inputs, name, std::move(bw));
}

// Gathers the (Cg*kH*kW) x (OH*OW) patch matrix of one sample/group.
template <typename T>
void im2col(const T* x, std::int64_t channels, std::int64_t height, std::int64_t width, int kh,
            int kw, int stride, int pad, std::int64_t oh, std::int64_t ow, T* col) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* row = col + ((c * kh + i) * kw + j) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * stride - pad + i;
          T* dst = row + y * ow;
          if (iy < 0 || iy >= height) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = x + (c * height + iy) * width;
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const std::int64_t ix = xo * stride - pad + j;
            dst[xo] = (ix >= 0 && ix < width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t height, std::int64_t width, int kh,
            int kw, int stride, int pad, std::int64_t oh, std::int64_t ow, T* x) {
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* row = col + ((c * kh + i) * kw + j) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t iy = y * stride - pad + i;
          if (iy < 0 || iy >= height) continue;
          T* dst = x + (c * height + iy) * width;
          const T* src = row + y * ow;
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const std::int64_t ix = xo * stride - pad + j;
            if (ix >= 0 && ix < width) dst[ix] += src[xo];
          }
        }
      }
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::array<std::int64_t, 4> sa{};
  std::array<std::int64_t, 4> sb{};
};

std::array<std::int64_t, 4> broadcast_strides(const Shape& s, const Shape& out) {
  const auto d = s.dims();
  const auto o = out.dims();
  std::array<std::int64_t, 4> natural{d[1] * d[2] * d[3], d[2] * d[3], d[3], 1};
  std::array<std::int64_t, 4> st{};
  for (int i = 0; i < 4; ++i) st[i] = (d[i] == 1 && o[i] != 1) ? 0 : natural[i];
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b);
  p.sa = broadcast_strides(a, p.out);
  p.sb = broadcast_strides(b, p.out);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  std::int64_t o = 0;
  for (std::int64_t n = 0; n < p.out.n; ++n) {
    for (std::int64_t c = 0; c < p.out.c; ++c) {
      for (std::int64_t h = 0; h < p.out.h; ++h) {
        const std::int64_t ba = n * p.sa[0] + c * p.sa[1] + h * p.sa[2];
        const std::int64_t bb = n * p.sb[0] + c * p.sb[1] + h * p.sb[2];
        for (std::int64_t w = 0; w < p.out.w; ++w, ++o) {
          f(o, ba + w * p.sa[3], bb + w * p.sb[3]);
        }
      }
    }
  }
}

enum class BinaryOp { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  detail::record_cost(name, 0, plan.out.numel() * flop_cost::kElementwise);
  if (a.is_meta() || b.is_meta()) return Tensor<T>::meta(plan.out);

  std::vector<T> out(static_cast<std::size_t>(plan.out.numel()));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (a.shape() == b.shape()) {
    const std::size_t count = out.size();
    for (std::size_t i = 0; i < count; ++i) {
      out[i] = op == BinaryOp::kAdd ? pa[i] + pb[i] : op == BinaryOp::kSub ? pa[i] - pb[i]
                                                                            : pa[i] * pb[i];
    }
  } else {
    for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      out[o] = op == BinaryOp::kAdd ? pa[ia] + pb[ib] : op == BinaryOp::kSub ? pa[ia] - pb[ib]
                                                                              : pa[ia] * pb[ib];
    });
  }
  auto ia = a.impl();
  auto ib = b.impl();
  return finish<T>(plan.out, std::move(out), {&a, &b}, name,
                   [plan, ia, ib, op](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     std::vector<T>* ga = sinks[0];
                     std::vector<T>* gb = sinks[1];
                     const T* va = ia->value.data();
                     const T* vb = ib->value.data();
                     for_each_broadcast(plan, [&](std::int64_t o, std::int64_t xa, std::int64_t xb) {
                       switch (op) {
                         case BinaryOp::kAdd:
                           if (ga) (*ga)[xa] += g[o];
                           if (gb) (*gb)[xb] += g[o];
                           break;
                         case BinaryOp::kSub:
                           if (ga) (*ga)[xa] += g[o];
                           if (gb) (*gb)[xb] -= g[o];
                           break;
                         case BinaryOp::kMul:
                           if (ga) (*ga)[xa] += g[o] * vb[xb];
                           if (gb) (*gb)[xb] += g[o] * va[xa];
                           break;
                       }
                     });
                   });
}

struct AxisLerp {
  std::int64_t i0 = 0;
  std::int64_t i1 = 0;
  double frac = 0.0;
};

std::vector<AxisLerp> half_pixel_map(std::int64_t in, std::int64_t out) {
  std::vector<AxisLerp> m(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::int64_t i0 = static_cast<std::int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, in - 1);
    m[static_cast<std::size_t>(d)] = AxisLerp{i0, i1, src - static_cast<double>(i0)};
  }
  return m;
}

std::uint64_t next_bits(std::mt19937_64& rng) { return rng(); }

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, int padding) {
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (padding < 0) throw ConfigError("padding must be >= 0");
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0) {
    throw DimensionError("kernel " + std::to_string(kernel) + " does not fit padded extent " +
                         std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  static constexpr const char* kAxisNames[4] = {"N", "C", "H", "W"};
  const auto da = a.dims();
  const auto db = b.dims();
  std::array<std::int64_t, 4> out{};
  for (int i = 0; i < 4; ++i) {
    if (da[i] == db[i] || db[i] == 1) {
      out[i] = da[i];
    } else if (da[i] == 1) {
      out[i] = db[i];
    } else {
      throw DimensionError(std::string("cannot broadcast ") + a.str() + " with " + b.str() +
                           ": axis " + kAxisNames[i] + " (" + std::to_string(da[i]) + " vs " +
                           std::to_string(db[i]) + ")");
    }
  }
  return Shape{out[0], out[1], out[2], out[3]};
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding, int groups) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (groups < 1 || xs.c % groups != 0 || ws.n % groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide input channels " +
                      std::to_string(xs.c) + " and output channels " + std::to_string(ws.n));
  }
  const std::int64_t cg = xs.c / groups;
  if (ws.c != cg) {
    throw DimensionError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str() +
                         " (groups=" + std::to_string(groups) + ")");
  }
  if (bias.defined() && bias.numel() != ws.n) {
    throw DimensionError("conv2d: bias " + bias.shape().str() + " does not match " +
                         std::to_string(ws.n) + " output channels");
  }
  const int kh = static_cast<int>(ws.h);
  const int kw = static_cast<int>(ws.w);
  const std::int64_t oh = conv_out_extent(xs.h, kh, stride, padding);
  const std::int64_t ow = conv_out_extent(xs.w, kw, stride, padding);
  const Shape os{xs.n, ws.n, oh, ow};
  const std::int64_t k = cg * kh * kw;
  const std::int64_t ohw = oh * ow;
  const std::int64_t ocg = ws.n / groups;

  const std::int64_t macs = os.numel() * k;
  detail::record_cost("conv2d", macs, 2 * macs + (bias.defined() ? os.numel() : 0));
  if (x.is_meta() || weight.is_meta()) return Tensor<T>::meta(os);

  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;
  std::vector<T> out(static_cast<std::size_t>(os.numel()));
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(k * ohw));
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      const T* xg = px + (n * xs.c + g * cg) * xs.h * xs.w;
      if (!direct) im2col(xg, cg, xs.h, xs.w, kh, kw, stride, padding, oh, ow, col.data());
      ConstMatMap<T> wm(pw + g * ocg * k, ocg, k);
      ConstMatMap<T> cm(direct ? xg : col.data(), k, ohw);
      MatMap<T> ym(out.data() + (n * ws.n + g * ocg) * ohw, ocg, ohw);
      ym.noalias() = wm * cm;
    }
    if (bias.defined()) {
      const T* pb = bias.data().data();
      for (std::int64_t c = 0; c < ws.n; ++c) {
        T* y = out.data() + (n * ws.n + c) * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) y[i] += pb[c];
      }
    }
  }

  auto ix = x.impl();
  auto iw = weight.impl();
  return finish<T>(
      os, std::move(out), {&x, &weight, &bias}, "conv2d",
      [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
        std::vector<T>* gx = sinks[0];
        std::vector<T>* gw = sinks[1];
        std::vector<T>* gb = sinks[2];
        std::vector<T> colbuf(direct ? 0 : static_cast<std::size_t>(k * ohw));
        std::vector<T> dcol(gx && !direct ? static_cast<std::size_t>(k * ohw) : 0);
        const T* vx = ix->value.data();
        const T* vw = iw->value.data();
        for (std::int64_t n = 0; n < xs.n; ++n) {
          for (int gi = 0; gi < groups; ++gi) {
            const T* xg = vx + (n * xs.c + gi * cg) * xs.h * xs.w;
            ConstMatMap<T> dy(g.data() + (n * ws.n + gi * ocg) * ohw, ocg, ohw);
            ConstMatMap<T> wm(vw + gi * ocg * k, ocg, k);
            if (gw) {
              if (!direct) im2col(xg, cg, xs.h, xs.w, kh, kw, stride, padding, oh, ow,
                                  colbuf.data());
              ConstMatMap<T> cm(direct ? xg : colbuf.data(), k, ohw);
              MatMap<T> dw(gw->data() + gi * ocg * k, ocg, k);
              dw.noalias() += dy * cm.transpose();
            }
            if (gx) {
              T* dxg = gx->data() + (n * xs.c + gi * cg) * xs.h * xs.w;
              if (direct) {
                MatMap<T> dxm(dxg, k, ohw);
                dxm.noalias() += wm.transpose() * dy;
              } else {
                MatMap<T> dcm(dcol.data(), k, ohw);
                dcm.noalias() = wm.transpose() * dy;
                col2im(dcol.data(), cg, xs.h, xs.w, kh, kw, stride, padding, oh, ow, dxg);
              }
            }
          }
          if (gb) {
            for (std::int64_t c = 0; c < ws.n; ++c) {
              const T* dy = g.data() + (n * ws.n + c) * ohw;
              T acc = T(0);
              for (std::int64_t i = 0; i < ohw; ++i) acc += dy[i];
              (*gb)[static_cast<std::size_t>(c)] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum, double eps, bool unbiased_running_var) {
  require_defined(x, "batch_norm");
  const Shape xs = x.shape();
  const std::int64_t channels = xs.c;
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("batch_norm: affine parameters must have " + std::to_string(channels) +
                         " entries, got " + gamma.shape().str() + " / " + beta.shape().str());
  }
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be > 0");
  if (!training && (!running_mean.defined() || !running_var.defined())) {
    throw StateError("batch_norm: evaluation mode requires initialized running statistics");
  }
  if (running_mean.defined() && running_mean.numel() != channels) {
    throw DimensionError("batch_norm: running statistics length does not match channels");
  }
  detail::record_cost("batch_norm", 0, xs.numel() * flop_cost::kBatchNorm);
  if (x.is_meta()) return Tensor<T>::meta(xs);

  const std::int64_t plane = xs.h * xs.w;
  const std::int64_t count = xs.n * plane;
  if (training && count == 0) throw DimensionError("batch_norm: empty batch");
  std::vector<T> mean_c(static_cast<std::size_t>(channels));
  std::vector<T> invstd(static_cast<std::size_t>(channels));
  const T* px = x.data().data();

  if (training) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = px + (n * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = px + (n * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean_c[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      if (running_mean.defined() && running_var.defined()) {
        const double unbiased =
            (unbiased_running_var && count > 1) ? ss / static_cast<double>(count - 1) : var;
        T& rm = running_mean.data()[c];
        T& rv = running_var.data()[c];
        rm = static_cast<T>((1.0 - momentum) * rm + momentum * mu);
        rv = static_cast<T>((1.0 - momentum) * rv + momentum * unbiased);
      }
    }
  } else {
    for (std::int64_t c = 0; c < channels; ++c) {
      mean_c[c] = running_mean.data()[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + eps));
    }
  }

  std::vector<T> out(static_cast<std::size_t>(xs.numel()));
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* p = px + (n * channels + c) * plane;
      T* o = out.data() + (n * channels + c) * plane;
      const T a = pg[c] * invstd[c];
      const T b = pb[c] - mean_c[c] * a;
      for (std::int64_t i = 0; i < plane; ++i) o[i] = p[i] * a + b;
    }
  }

  auto ix = x.impl();
  auto ig = gamma.impl();
  return finish<T>(
      xs, std::move(out), {&x, &gamma, &beta}, "batch_norm",
      [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
        std::vector<T>* gx = sinks[0];
        std::vector<T>* ggamma = sinks[1];
        std::vector<T>* gbeta = sinks[2];
        const T* vx = ix->value.data();
        const T* vg = ig->value.data();
        for (std::int64_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0;
          double sum_dy_xhat = 0.0;
          for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* p = vx + (n * channels + c) * plane;
            const T* dy = g.data() + (n * channels + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (p[i] - mean_c[c]) * invstd[c];
            }
          }
          if (gbeta) (*gbeta)[c] += static_cast<T>(sum_dy);
          if (ggamma) (*ggamma)[c] += static_cast<T>(sum_dy_xhat);
          if (!gx) continue;
          const T scale_c = vg[c] * invstd[c];
          for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* p = vx + (n * channels + c) * plane;
            const T* dy = g.data() + (n * channels + c) * plane;
            T* dx = gx->data() + (n * channels + c) * plane;
            if (training) {
              const double m = static_cast<double>(count);
              for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (p[i] - mean_c[c]) * invstd[c];
                dx[i] += static_cast<T>(scale_c / m * (m * dy[i] - sum_dy - xhat * sum_dy_xhat));
              }
            } else {
              for (std::int64_t i = 0; i < plane; ++i) dx[i] += dy[i] * scale_c;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> strip_pool(const Tensor<T>& x, PoolMode mode) {
  require_defined(x, "strip_pool");
  const Shape xs = x.shape();
  if (xs.w < 1) throw DimensionError("strip_pool: width must be >= 1, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h, 1};
  detail::record_cost("strip_pool", 0, xs.numel());
  if (x.is_meta()) return Tensor<T>::meta(os);

  const std::int64_t rows = xs.n * xs.c * xs.h;
  std::vector<T> out(static_cast<std::size_t>(rows));
  std::vector<std::int64_t> argmax(mode == PoolMode::kMax ? static_cast<std::size_t>(rows) : 0);
  const T* px = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * xs.w;
    if (mode == PoolMode::kAvg) {
      T acc = T(0);
      for (std::int64_t i = 0; i < xs.w; ++i) acc += row[i];
      out[r] = acc / static_cast<T>(xs.w);
    } else {
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < xs.w; ++i) {
        if (row[i] > row[best]) best = i;
      }
      argmax[r] = best;
      out[r] = row[best];
    }
  }
  const std::int64_t width = xs.w;
  return finish<T>(os, std::move(out), {&x}, mode == PoolMode::kAvg ? "strip_avg" : "strip_max",
                   [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     std::vector<T>* gx = sinks[0];
                     if (!gx) return;
                     for (std::int64_t r = 0; r < rows; ++r) {
                       T* dx = gx->data() + r * width;
                       if (mode == PoolMode::kAvg) {
                         const T v = g[r] / static_cast<T>(width);
                         for (std::int64_t i = 0; i < width; ++i) dx[i] += v;
                       } else {
                         dx[argmax[r]] += g[r];
                       }
                     }
                   });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_defined(x, "global_avg_pool");
  const Shape xs = x.shape();
  if (xs.h < 1 || xs.w < 1) {
    throw DimensionError("global_avg_pool: empty spatial dims in " + xs.str());
  }
  const Shape os{xs.n, xs.c, 1, 1};
  detail::record_cost("global_avg_pool", 0, xs.numel());
  if (x.is_meta()) return Tensor<T>::meta(os);

  const std::int64_t planes = xs.n * xs.c;
  const std::int64_t plane = xs.h * xs.w;
  std::vector<T> out(static_cast<std::size_t>(planes));
  const T* px = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += px[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  return finish<T>(os, std::move(out), {&x}, "global_avg_pool",
                   [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     std::vector<T>* gx = sinks[0];
                     if (!gx) return;
                     for (std::int64_t p = 0; p < planes; ++p) {
                       const T v = g[p] / static_cast<T>(plane);
                       T* dx = gx->data() + p * plane;
                       for (std::int64_t i = 0; i < plane; ++i) dx[i] += v;
                     }
                   });
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require_defined(x, "bilinear_upsample");
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_upsample: target size must be >= 1");
  const Shape xs = x.shape();
  if (xs.h < 1 || xs.w < 1) throw DimensionError("bilinear_upsample: empty input " + xs.str());
  const Shape os{xs.n, xs.c, out_h, out_w};
  detail::record_cost("bilinear", 0, os.numel() * flop_cost::kBilinear);
  if (x.is_meta()) return Tensor<T>::meta(os);

  const auto ym = half_pixel_map(xs.h, out_h);
  const auto xm = half_pixel_map(xs.w, out_w);
  const std::int64_t planes = xs.n * xs.c;
  std::vector<T> out(static_cast<std::size_t>(os.numel()));
  const T* px = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = px + p * xs.h * xs.w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const AxisLerp& ly = ym[oy];
      const T fy = static_cast<T>(ly.frac);
      const T* r0 = src + ly.i0 * xs.w;
      const T* r1 = src + ly.i1 * xs.w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const AxisLerp& lx = xm[ox];
        const T fx = static_cast<T>(lx.frac);
        const T top = (T(1) - fx) * r0[lx.i0] + fx * r0[lx.i1];
        const T bot = (T(1) - fx) * r1[lx.i0] + fx * r1[lx.i1];
        dst[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return finish<T>(os, std::move(out), {&x}, "bilinear",
                   [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     std::vector<T>* gx = sinks[0];
                     if (!gx) return;
                     for (std::int64_t p = 0; p < planes; ++p) {
                       T* dsrc = gx->data() + p * xs.h * xs.w;
                       const T* dout = g.data() + p * out_h * out_w;
                       for (std::int64_t oy = 0; oy < out_h; ++oy) {
                         const AxisLerp& ly = ym[oy];
                         const T fy = static_cast<T>(ly.frac);
                         T* r0 = dsrc + ly.i0 * xs.w;
                         T* r1 = dsrc + ly.i1 * xs.w;
                         for (std::int64_t ox = 0; ox < out_w; ++ox) {
                           const AxisLerp& lx = xm[ox];
                           const T fx = static_cast<T>(lx.frac);
                           const T v = dout[oy * out_w + ox];
                           r0[lx.i0] += (T(1) - fy) * (T(1) - fx) * v;
                           r0[lx.i1] += (T(1) - fy) * fx * v;
                           r1[lx.i0] += fy * (T(1) - fx) * v;
                           r1[lx.i1] += fy * fx * v;
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Axis axis) {
  require_defined(x, "softmax");
  const Shape xs = x.shape();
  const auto d = xs.dims();
  const int a = static_cast<int>(axis);
  const std::int64_t len = d[a];
  if (len < 1) throw DimensionError("softmax: axis length must be >= 1 in " + xs.str());
  detail::record_cost("softmax", 0, xs.numel() * flop_cost::kSoftmax);
  if (x.is_meta()) return Tensor<T>::meta(xs);

  std::int64_t inner = 1;
  for (int i = a + 1; i < 4; ++i) inner *= d[i];
  std::int64_t outer = 1;
  for (int i = 0; i < a; ++i) outer *= d[i];

  std::vector<T> out(static_cast<std::size_t>(xs.numel()));
  const T* px = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T mx = px[base];
      for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
      T total = T(0);
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(px[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::int64_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  std::vector<T> saved = out;
  return finish<T>(xs, std::move(out), {&x}, "softmax",
                   [=, y = std::move(saved)](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     std::vector<T>* gx = sinks[0];
                     if (!gx) return;
                     for (std::int64_t o = 0; o < outer; ++o) {
                       for (std::int64_t i = 0; i < inner; ++i) {
                         const std::int64_t base = o * len * inner + i;
                         T dot = T(0);
                         for (std::int64_t k = 0; k < len; ++k) {
                           dot += g[base + k * inner] * y[base + k * inner];
                         }
                         for (std::int64_t k = 0; k < len; ++k) {
                           const std::int64_t j = base + k * inner;
                           (*gx)[j] += y[j] * (g[j] - dot);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryOp::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryOp::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryOp::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  require_defined(x, "scale");
  detail::record_cost("scale", 0, x.numel() * flop_cost::kElementwise);
  if (x.is_meta()) return Tensor<T>::meta(x.shape());
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  return finish<T>(x.shape(), std::move(out), {&x}, "scale",
                   [factor](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     for (std::size_t i = 0; i < g.size(); ++i) (*sinks[0])[i] += g[i] * factor;
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  require_defined(x, "relu");
  detail::record_cost("relu", 0, x.numel() * flop_cost::kRelu);
  if (x.is_meta()) return Tensor<T>::meta(x.shape());
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  auto ix = x.impl();
  return finish<T>(x.shape(), std::move(out), {&x}, "relu",
                   [ix](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     const T* v = ix->value.data();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       if (v[i] > T(0)) (*sinks[0])[i] += g[i];
                     }
                   });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  require_defined(x, "sigmoid");
  detail::record_cost("sigmoid", 0, x.numel() * flop_cost::kSigmoid);
  if (x.is_meta()) return Tensor<T>::meta(x.shape());
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = T(1) / (T(1) + std::exp(-v));
  std::vector<T> saved = out;
  return finish<T>(x.shape(), std::move(out), {&x}, "sigmoid",
                   [y = std::move(saved)](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       (*sinks[0])[i] += g[i] * y[i] * (T(1) - y[i]);
                     }
                   });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must satisfy 0 <= p < 1");
  if (!training || p == 0.0) return x;
  detail::record_cost("dropout", 0, x.numel() * flop_cost::kDropout);
  if (x.is_meta()) return Tensor<T>::meta(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (T& m : mask) {
    const double u = static_cast<double>(next_bits(rng) >> 11) * 0x1.0p-53;
    m = u < p ? T(0) : keep_scale;
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return finish<T>(x.shape(), std::move(out), {&x}, "dropout",
                   [m = std::move(mask)](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     for (std::size_t i = 0; i < g.size(); ++i) (*sinks[0])[i] += g[i] * m[i];
                   });
}

template <typename T>
Tensor<T> max_pool(const Tensor<T>& x, int kernel, int stride, int padding) {
  require_defined(x, "max_pool");
  if (kernel < 1) throw ConfigError("max_pool: kernel must be >= 1");
  if (padding * 2 > kernel) throw ConfigError("max_pool: padding must be at most half the kernel");
  const Shape xs = x.shape();
  const std::int64_t oh = conv_out_extent(xs.h, kernel, stride, padding);
  const std::int64_t ow = conv_out_extent(xs.w, kernel, stride, padding);
  const Shape os{xs.n, xs.c, oh, ow};
  detail::record_cost("max_pool", 0, os.numel() * kernel * kernel);
  if (x.is_meta()) return Tensor<T>::meta(os);

  const std::int64_t planes = xs.n * xs.c;
  std::vector<T> out(static_cast<std::size_t>(os.numel()));
  std::vector<std::int64_t> argmax(out.size());
  const T* px = x.data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = px + p * xs.h * xs.w;
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_at = -1;
        for (int i = 0; i < kernel; ++i) {
          const std::int64_t iy = y * stride - padding + i;
          if (iy < 0 || iy >= xs.h) continue;
          for (int j = 0; j < kernel; ++j) {
            const std::int64_t ix = xo * stride - padding + j;
            if (ix < 0 || ix >= xs.w) continue;
            const T v = src[iy * xs.w + ix];
            if (best_at < 0 || v > best) {
              best = v;
              best_at = iy * xs.w + ix;
            }
          }
        }
        const std::int64_t o = (p * oh + y) * ow + xo;
        out[o] = best;
        argmax[o] = p * xs.h * xs.w + best_at;
      }
    }
  }
  return finish<T>(os, std::move(out), {&x}, "max_pool",
                   [idx = std::move(argmax)](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     for (std::size_t i = 0; i < g.size(); ++i) (*sinks[0])[idx[i]] += g[i];
                   });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  Shape os = parts.front().shape();
  os.c = 0;
  bool meta = false;
  for (const auto& t : parts) {
    require_defined(t, "concat_channels");
    const Shape s = t.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w) {
      throw DimensionError("concat_channels: " + s.str() + " does not match " +
                           parts.front().shape().str() + " outside the channel axis");
    }
    os.c += s.c;
    meta = meta || t.is_meta();
  }
  if (meta) return Tensor<T>::meta(os);

  const std::int64_t plane = os.h * os.w;
  std::vector<T> out(static_cast<std::size_t>(os.numel()));
  std::vector<std::int64_t> offsets;
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const auto& t : parts) {
    const std::int64_t c = t.shape().c;
    const T* src = t.data().data();
    for (std::int64_t n = 0; n < os.n; ++n) {
      std::copy(src + n * c * plane, src + (n + 1) * c * plane,
                out.data() + (n * os.c + offset) * plane);
    }
    offsets.push_back(offset);
    widths.push_back(c);
    offset += c;
  }
  std::vector<const Tensor<T>*> inputs;
  for (const auto& t : parts) inputs.push_back(&t);
  check_finite(out, "concat_channels");
  return detail::make_result<T>(
      os, std::move(out), inputs, "concat_channels",
      [=](std::span<const T> g, std::span<std::vector<T>*> sinks) {
        for (std::size_t k = 0; k < sinks.size(); ++k) {
          if (!sinks[k]) continue;
          const std::int64_t c = widths[k];
          for (std::int64_t n = 0; n < os.n; ++n) {
            const T* src = g.data() + (n * os.c + offsets[k]) * plane;
            T* dst = sinks[k]->data() + n * c * plane;
            for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  detail::record_cost("sum", 0, x.numel());
  if (x.is_meta()) return Tensor<T>::meta(Shape{1, 1, 1, 1});
  T acc = T(0);
  for (const T v : x.data()) acc += v;
  return finish<T>(Shape{1, 1, 1, 1}, {acc}, {&x}, "sum",
                   [](std::span<const T> g, std::span<std::vector<T>*> sinks) {
                     if (!sinks[0]) return;
                     for (T& v : *sinks[0]) v += g[0];
                   });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

#define S2FPN_INSTANTIATE(T)                                                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,    \
                               int);                                                              \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                   Tensor<T>&, Tensor<T>&, bool, double, double, bool);           \
  template Tensor<T> strip_pool<T>(const Tensor<T>&, PoolMode);                                   \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                        \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, std::int64_t, std::int64_t);          \
  template Tensor<T> softmax<T>(const Tensor<T>&, Axis);                                          \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, std::mt19937_64&);                \
  template Tensor<T> max_pool<T>(const Tensor<T>&, int, int, int);                                \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&);

S2FPN_INSTANTIATE(float)
S2FPN_INSTANTIATE(double)
#undef S2FPN_INSTANTIATE

}  // namespace ops
}  // namespace s2fpn
