#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "attbalance/tensor.hpp"

namespace attbalance {

struct GradCheckOptions {
  double step = 1e-6;
  double tol = 1e-4;
  // Entries where both analytic and numeric magnitudes fall below this floor
  // are counted as agreeing; central differences carry ~1e-10 of absolute
  // round-off, which would dominate the relative error of dead gradients.
  double zero_floor = 1e-6;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_analytic = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst_rel_err = 0.0;
  std::string worst_param;
  bool pass = true;
};

// Compares the tape's gradients of f against central finite differences for
// every element of every named parameter. f must be deterministic in the
// parameter values and must not manage the active tape itself.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace attbalance
