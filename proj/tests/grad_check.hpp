#pragma once

// Central-difference oracle for hand-written backward passes. Only ever calls
// the forward objective, so it stays independent of the code it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fedmoe/params.hpp"

namespace fedmoe::testing {

struct GradMismatch {
  std::string role;
  int layer;
  std::size_t index;
  double analytic;
  double numeric;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double worst_relative = 0.0;
  std::vector<GradMismatch> mismatches;
};

/// |a - n| / max(|a|, |n|), with an absolute floor of 1e-8 below which both
/// are considered zero.
inline double relative_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= 1e-8) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

inline GradCheckReport check_gradients(
    const ParamRefs& params, const std::function<double()>& objective, double eps, double rtol,
    const std::function<bool(const Parameter&, std::size_t)>& skip = nullptr) {
  GradCheckReport report;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (skip && skip(*p, i)) {
        ++report.skipped;
        continue;
      }
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = objective();
      p->value[i] = orig - eps;
      const double down = objective();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double rel = relative_error(analytic, numeric);
      report.worst_relative = std::max(report.worst_relative, rel);
      if (rel > rtol) report.mismatches.push_back({p->role, p->layer, i, analytic, numeric});
      ++report.checked;
    }
  }
  return report;
}

}  // namespace fedmoe::testing
