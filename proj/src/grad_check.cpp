#include "attbalance/grad_check.hpp"

#include <cmath>

namespace attbalance {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard no_grad;
  const double v = f().item();
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: objective is not finite");
  }
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts) {
  Tape& tape = Tape::active();
  tape.reset();
  for (const auto& [name, p] : params) {
    Tensor handle = p;
    handle.drop_grad();
  }

  Tensor loss = f();
  if (!std::isfinite(loss.item())) {
    throw NumericError("grad_check: objective is not finite");
  }
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    if (p.has_grad()) {
      analytic.push_back(p.grad());
    } else {
      analytic.emplace_back(p.numel(), 0.0);  // parameter unused by f
    }
  }
  tape.reset();

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor p = params[pi].second;
    GradCheckEntry entry;
    entry.name = name;
    auto& values = p.data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + opts.step;
      const double f_plus = eval_scalar(f);
      values[j] = saved - opts.step;
      const double f_minus = eval_scalar(f);
      values[j] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double a = analytic[pi][j];
      entry.max_abs_analytic = std::max(entry.max_abs_analytic, std::fabs(a));
      const double magnitude = std::max(std::fabs(a), std::fabs(numeric));
      if (magnitude < opts.zero_floor) continue;
      const double rel = std::fabs(a - numeric) / magnitude;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    entry.pass = entry.max_rel_err < opts.tol;
    if (entry.max_rel_err > report.worst_rel_err) {
      report.worst_rel_err = entry.max_rel_err;
      report.worst_param = entry.name;
    }
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace attbalance
