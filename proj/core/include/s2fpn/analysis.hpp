#pragma once

#include <algorithm>
#include <chrono>
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "s2fpn/cost.hpp"
#include "s2fpn/module.hpp"
#include "s2fpn/parallel.hpp"
#include "s2fpn/random.hpp"

namespace s2fpn {

/// One line of a parameter / cost report, keyed by module prefix.
struct ReportRow {
  std::string module;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
};

struct LatencyStats {
  int warmup = 0;
  int threads = 1;
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double fps = 0.0;  ///< 1000 / mean_ms
};

struct AnalysisReport {
  std::string title;
  Shape input{};
  std::vector<ReportRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t total_flops = 0;
  std::optional<LatencyStats> latency;

  /// Aligned plain-text table with the counting convention in the header.
  std::string text() const;
  /// "module,params,flops,macs" rows followed by a "total" row.
  std::string csv() const;
};

/// Report key for a dotted path: the first component, plus any purely numeric
/// components that directly follow it ("apf.3.ssam.alpha" -> "apf.3").
std::string report_group(const std::string& path);

/// Exact element counts of every parameter, grouped with report_group.
template <typename T>
std::vector<ReportRow> count_params(const Module<T>& model);

/// Groups recorded kernel costs with report_group (unscoped kernels -> "(top)").
std::vector<ReportRow> group_costs(const std::vector<CostEntry>& entries);

/// Merges parameter and cost rows and fills the totals. Row order follows the
/// first appearance in `params`, then in `costs`.
AnalysisReport merge_report(std::string title, const Shape& input, const std::vector<ReportRow>& params,
                            const std::vector<ReportRow>& costs);

namespace detail {
template <typename T>
T module_scalar(const Module<T>&);
}  // namespace detail

/// Static cost of one evaluation-mode forward pass at `input`, computed by
/// propagating shapes through meta tensors (no arithmetic is performed).
/// `Model` is any module with `forward(const Tensor<T>&)`.
template <typename Model>
AnalysisReport count_flops(Model& model, const Shape& input, std::string title = "model") {
  if (input.n < 1 || input.c < 1 || input.h < 1 || input.w < 1) {
    throw DimensionError("count_flops: unsupported input shape " + input.str() +
                         " (all dims must be static and positive)");
  }
  using T = decltype(detail::module_scalar(model));
  const bool was_training = model.is_training();
  model.eval();
  std::vector<CostEntry> entries;
  {
    NoGradGuard no_grad;
    CostRecorder recorder;
    try {
      (void)model.forward(Tensor<T>::meta(input));
    } catch (...) {
      model.train(was_training);
      throw;
    }
    entries = recorder.entries();
  }
  model.train(was_training);
  return merge_report(std::move(title), input, count_params(model), group_costs(entries));
}

/// Nearest-rank percentile of unsorted samples, q in [0, 1].
double percentile(std::vector<double> samples, double q);

/// Fills mean / p50 / p95 / FPS from samples_ms.
void finalize_latency(LatencyStats& stats);

/// Wall-clock latency of evaluation-mode forward passes on a seeded random
/// input. Only the forward call is timed.
template <typename Model>
LatencyStats benchmark_latency(Model& model, const Shape& input, int warmup, int iters,
                               std::uint64_t seed, int threads = 1) {
  using T = decltype(detail::module_scalar(model));
  using Clock = std::chrono::steady_clock;
  const int previous_threads = num_threads();
  set_num_threads(threads);
  const bool was_training = model.is_training();
  model.eval();

  std::mt19937_64 rng(seed);
  std::vector<T> values(static_cast<std::size_t>(input.numel()));
  for (auto& v : values) v = static_cast<T>(normal01(rng));
  const Tensor<T> x = Tensor<T>::from(input, std::move(values));

  LatencyStats stats;
  stats.warmup = warmup;
  stats.threads = num_threads();
  {
    NoGradGuard no_grad;
    for (int i = 0; i < warmup; ++i) (void)model.forward(x);
    stats.samples_ms.reserve(static_cast<std::size_t>(std::max(iters, 0)));
    for (int i = 0; i < iters; ++i) {
      const auto start = Clock::now();
      (void)model.forward(x);
      const std::chrono::duration<double, std::milli> elapsed = Clock::now() - start;
      stats.samples_ms.push_back(elapsed.count());
    }
  }
  model.train(was_training);
  set_num_threads(previous_threads);
  finalize_latency(stats);
  return stats;
}

/// Outcome of a central-difference gradient check.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  std::string worst_input;  ///< name of the input holding the worst element
  Shape worst_shape{};
  std::array<std::int64_t, 4> worst_coord{};  ///< (n, c, h, w)
  double analytic = 0.0;
  double numeric = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
  /// One-line summary naming the worst element.
  std::string report() const;
};

/// A named tensor whose gradient is checked. The tensor is perturbed in place,
/// so module parameters can be passed by handle.
struct GradInput {
  std::string name;
  Tensor<double> tensor;
};

/// Compares reverse-mode gradients of L = sum(f(inputs) * R) against central
/// differences for every element of every input, where R is a fixed random
/// projection drawn from `seed`. Relative error is
/// |a - n| / max(|a|, |n|, 1e-3). `f` must be deterministic (no dropout).
GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<GradInput> inputs,
                           double eps = 1e-6, double tolerance = 1e-4, std::uint64_t seed = 0);

}  // namespace s2fpn
