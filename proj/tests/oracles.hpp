#pragma once

// Test-only oracles, independent of the library's implementation paths.

#include <cmath>
#include <functional>
#include <vector>

#include "attbalance/rng.hpp"
#include "attbalance/tensor.hpp"

namespace testing_oracles {

// Central finite differences of a scalar objective with respect to one
// tensor's raw buffer. Evaluates with recording off.
inline std::vector<double> fd_gradient(const std::function<double()>& eval,
                                       attbalance::Tensor param, double step = 1e-6) {
  std::vector<double> grad(param.numel(), 0.0);
  auto& values = param.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    attbalance::NoGradGuard no_grad;
    values[i] = saved + step;
    const double f_plus = eval();
    values[i] = saved - step;
    const double f_minus = eval();
    values[i] = saved;
    grad[i] = (f_plus - f_minus) / (2.0 * step);
  }
  return grad;
}

// Worst guarded relative error between two gradient vectors. Pairs whose
// larger magnitude falls below the floor are treated as matching zeros.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double mag = std::max(std::fabs(a[i]), std::fabs(b[i]));
    if (mag < floor) continue;
    worst = std::max(worst, std::fabs(a[i] - b[i]) / mag);
  }
  return worst;
}

// O(n^2) Spearman oracle: ranks by pairwise counting (average rank for
// ties), correlation by the raw-moment Pearson formula.
inline std::vector<double> counting_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t less = 0;
    std::size_t equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (v[j] < v[i]) ++less;
      if (v[j] == v[i]) ++equal;
    }
    ranks[i] = static_cast<double>(less) + (static_cast<double>(equal) - 1.0) / 2.0 + 1.0;
  }
  return ranks;
}

inline double brute_force_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2) return 1.0;
  const std::vector<double> rx = counting_ranks(x);
  const std::vector<double> ry = counting_ranks(y);
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += rx[i];
    sy += ry[i];
    sxy += rx[i] * ry[i];
    sxx += rx[i] * rx[i];
    syy += ry[i] * ry[i];
  }
  const double dn = static_cast<double>(n);
  const double vx = dn * sxx - sx * sx;
  const double vy = dn * syy - sy * sy;
  if (vx <= 0.0 || vy <= 0.0) return 1.0;
  return (dn * sxy - sx * sy) / std::sqrt(vx * vy);
}

inline attbalance::Tensor random_tensor(attbalance::Rng& rng, attbalance::Shape shape,
                                        double lo = -1.0, double hi = 1.0,
                                        bool requires_grad = false) {
  attbalance::Tensor t = attbalance::Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace testing_oracles
