#include "s2fpn/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "s2fpn/ops.hpp"

namespace s2fpn {

namespace {

bool is_number(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Keeps rows in first-seen order while accumulating by key.
class RowTable {
 public:
  ReportRow& operator[](const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, rows_.size());
    if (inserted) rows_.push_back(ReportRow{key});
    return rows_[it->second];
  }
  std::vector<ReportRow> take() { return std::move(rows_); }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<ReportRow> rows_;
};

}  // namespace

std::string report_group(const std::string& path) {
  if (path.empty()) return "(top)";
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  std::string key = parts.front();
  for (std::size_t i = 1; i < parts.size() && is_number(parts[i]); ++i) key += "." + parts[i];
  return key;
}

template <typename T>
std::vector<ReportRow> count_params(const Module<T>& model) {
  RowTable table;
  for (const auto& p : model.named_parameters()) table[report_group(p.name)].params += p.value.numel();
  return table.take();
}

std::vector<ReportRow> group_costs(const std::vector<CostEntry>& entries) {
  RowTable table;
  for (const auto& e : entries) {
    ReportRow& row = table[report_group(e.scope)];
    row.macs += e.macs;
    row.flops += e.flops;
  }
  return table.take();
}

AnalysisReport merge_report(std::string title, const Shape& input, const std::vector<ReportRow>& params,
                            const std::vector<ReportRow>& costs) {
  RowTable table;
  for (const auto& r : params) table[r.module].params += r.params;
  for (const auto& r : costs) {
    ReportRow& row = table[r.module];
    row.macs += r.macs;
    row.flops += r.flops;
  }
  AnalysisReport report;
  report.title = std::move(title);
  report.input = input;
  report.rows = table.take();
  for (const auto& r : report.rows) {
    report.total_params += r.params;
    report.total_macs += r.macs;
    report.total_flops += r.flops;
  }
  return report;
}

std::string AnalysisReport::text() const {
  std::ostringstream out;
  out << "# " << title << " @ input " << input.str() << "\n";
  out << "# convention: FLOPs count 1 multiply-accumulate as 2 FLOPs plus 1 per conv bias add;\n"
      << "#   BN " << flop_cost::kBatchNorm << ", ReLU " << flop_cost::kRelu << ", sigmoid "
      << flop_cost::kSigmoid << ", softmax " << flop_cost::kSoftmax << ", bilinear " << flop_cost::kBilinear
      << ", element-wise " << flop_cost::kElementwise
      << " per output element; pooling 1 per input element.\n"
      << "#   MACs count convolution multiply-accumulates only. Inference graph (aux heads off).\n";
  std::size_t name_w = std::string("module").size();
  for (const auto& r : rows) name_w = std::max(name_w, r.module.size());
  name_w = std::max(name_w, std::string("total").size());
  auto line = [&](const std::string& name, std::int64_t params, std::int64_t macs, std::int64_t flops) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-*s %14lld %10.3f %16lld %10.3f %16lld %10.3f\n", static_cast<int>(name_w),
                  name.c_str(), static_cast<long long>(params), static_cast<double>(params) / 1e6,
                  static_cast<long long>(macs), static_cast<double>(macs) / 1e9, static_cast<long long>(flops),
                  static_cast<double>(flops) / 1e9);
    out << buf;
  };
  char head[256];
  std::snprintf(head, sizeof(head), "%-*s %14s %10s %16s %10s %16s %10s\n", static_cast<int>(name_w), "module",
                "params", "M", "macs", "GMAC", "flops", "GFLOP");
  out << head;
  for (const auto& r : rows) line(r.module, r.params, r.macs, r.flops);
  line("total", total_params, total_macs, total_flops);
  if (latency) {
    out << "latency: threads " << latency->threads << ", warmup " << latency->warmup << ", iters "
        << latency->samples_ms.size() << ", mean " << fixed(latency->mean_ms, 3) << " ms, p50 "
        << fixed(latency->p50_ms, 3) << " ms, p95 " << fixed(latency->p95_ms, 3) << " ms, FPS "
        << fixed(latency->fps, 2) << "\n";
  }
  return out.str();
}

std::string AnalysisReport::csv() const {
  std::ostringstream out;
  out << "module,params,flops,macs\n";
  for (const auto& r : rows) out << r.module << "," << r.params << "," << r.flops << "," << r.macs << "\n";
  out << "total," << total_params << "," << total_flops << "," << total_macs << "\n";
  return out.str();
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const double rank = std::ceil(std::clamp(q, 0.0, 1.0) * static_cast<double>(samples.size()));
  const auto idx = static_cast<std::size_t>(std::max(rank, 1.0)) - 1;
  return samples[std::min(idx, samples.size() - 1)];
}

void finalize_latency(LatencyStats& stats) {
  const auto& s = stats.samples_ms;
  if (s.empty()) return;
  stats.mean_ms = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  stats.p50_ms = percentile(s, 0.5);
  stats.p95_ms = percentile(s, 0.95);
  stats.fps = stats.mean_ms > 0.0 ? 1000.0 / stats.mean_ms : 0.0;
}

std::string GradCheckResult::report() const {
  std::ostringstream out;
  out << (passed() ? "ok" : "FAILED") << ": max rel err " << max_rel_error << " (tol " << tolerance << ") over "
      << checked << " elements";
  if (!worst_input.empty()) {
    out << "; worst " << worst_input << worst_shape.str() << " at (" << worst_coord[0] << "," << worst_coord[1]
        << "," << worst_coord[2] << "," << worst_coord[3] << ") analytic " << analytic << " numeric " << numeric;
  }
  return out.str();
}

GradCheckResult grad_check(const std::function<Tensor<double>()>& f, std::vector<GradInput> inputs, double eps,
                           double tolerance, std::uint64_t seed) {
  GradCheckResult result;
  result.tolerance = tolerance;
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }

  const Tensor<double> out = f();
  std::mt19937_64 rng(seed);
  std::vector<double> projection(static_cast<std::size_t>(out.numel()));
  for (auto& r : projection) r = normal01(rng);
  backward(out, std::span<const double>(projection));

  auto objective = [&]() {
    NoGradGuard no_grad;
    const Tensor<double> y = f();
    const auto v = y.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * projection[i];
    return acc;
  };

  for (auto& in : inputs) {
    const std::vector<double> analytic = in.tensor.grad();
    auto values = in.tensor.data();
    const Shape s = in.tensor.shape();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = objective();
      values[i] = saved - eps;
      const double minus = objective();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++result.checked;
      if (rel >= result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = in.name;
        result.worst_shape = s;
        auto idx = static_cast<std::int64_t>(i);
        result.worst_coord[3] = idx % s.w;
        idx /= s.w;
        result.worst_coord[2] = idx % s.h;
        idx /= s.h;
        result.worst_coord[1] = idx % s.c;
        result.worst_coord[0] = idx / s.c;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template std::vector<ReportRow> count_params<float>(const Module<float>&);
template std::vector<ReportRow> count_params<double>(const Module<double>&);

}  // namespace s2fpn
