#include "s2fpn/cost.hpp"

namespace s2fpn {

namespace {
thread_local CostRecorder* g_recorder = nullptr;
thread_local std::vector<std::string> g_scopes;
}  // namespace

CostRecorder::CostRecorder() : previous_(g_recorder) { g_recorder = this; }
CostRecorder::~CostRecorder() { g_recorder = previous_; }

std::int64_t CostRecorder::total_macs() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.macs;
  return total;
}

std::int64_t CostRecorder::total_flops() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) total += e.flops;
  return total;
}

void CostRecorder::add(std::string_view op, std::int64_t macs, std::int64_t flops) {
  entries_.push_back(CostEntry{current_cost_scope(), std::string(op), macs, flops});
}

CostScope::CostScope(std::string_view name) { g_scopes.emplace_back(name); }
CostScope::~CostScope() { g_scopes.pop_back(); }

std::string current_cost_scope() {
  std::string path;
  for (const auto& s : g_scopes) {
    if (s.empty()) continue;
    if (!path.empty()) path += '.';
    path += s;
  }
  return path;
}

namespace detail {
void record_cost(std::string_view op, std::int64_t macs, std::int64_t flops) {
  if (g_recorder != nullptr) g_recorder->add(op, macs, flops);
}
}  // namespace detail

}  // namespace s2fpn
