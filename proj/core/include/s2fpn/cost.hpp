#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace s2fpn {

/// One kernel invocation as seen by the cost recorder.
struct CostEntry {
  std::string scope;  ///< dotted module path active when the kernel ran
  std::string op;
  std::int64_t macs = 0;   ///< multiply-accumulates of conv kernels
  std::int64_t flops = 0;  ///< 2 per MAC + bias adds + per-element costs of linear ops
};

/// Collects CostEntry records for every kernel executed on this thread while
/// it is installed. Works identically for real and meta tensors.
class CostRecorder {
 public:
  CostRecorder();
  ~CostRecorder();
  CostRecorder(const CostRecorder&) = delete;
  CostRecorder& operator=(const CostRecorder&) = delete;

  const std::vector<CostEntry>& entries() const { return entries_; }
  std::int64_t total_macs() const;
  std::int64_t total_flops() const;

  void add(std::string_view op, std::int64_t macs, std::int64_t flops);

 private:
  std::vector<CostEntry> entries_;
  CostRecorder* previous_;
};

/// Pushes a module name onto the thread's scope path while alive.
class CostScope {
 public:
  explicit CostScope(std::string_view name);
  ~CostScope();
  CostScope(const CostScope&) = delete;
  CostScope& operator=(const CostScope&) = delete;
};

/// Dotted path of the currently open scopes ("" at top level).
std::string current_cost_scope();

namespace detail {
void record_cost(std::string_view op, std::int64_t macs, std::int64_t flops);
}  // namespace detail

}  // namespace s2fpn
