#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s2fpn/analysis.hpp"

namespace s2fpn::app {

struct GradCheckCase {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckResult result;
};

/// Scopes accepted by run_gradcheck_suite: "ops" (every differentiable
/// kernel), "blocks" (SSAM, CAM, FRB, CFGB, APF stage, GFU, losses), "all",
/// or a single case name.
std::vector<std::string> gradcheck_case_names();

/// Runs every case in `scope` once per seed 0..seeds-1 on randomized small
/// shapes in 64-bit arithmetic.
std::vector<GradCheckCase> run_gradcheck_suite(const std::string& scope, int seeds, double tolerance = 1e-4,
                                               double eps = 1e-6);

}  // namespace s2fpn::app
