#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "irnet/rng.hpp"
#include "irnet/tensor.hpp"

namespace irnet {

// Central finite-difference verification of analytic gradients. The function
// under test is always evaluated in 64-bit; the analytic gradients may come
// from either the float production path (cast up) or the double path.
struct GradCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-5;
  int64_t max_coords_per_input = 64;  // random coordinate subset cap
  uint64_t seed = 0;
};

struct GradCheckReport {
  struct PerInput {
    std::string name;
    double max_rel_error = 0.0;
    int64_t coords_checked = 0;
    int64_t worst_flat_index = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
  };
  bool passed = false;
  double tolerance = 0.0;
  std::vector<PerInput> inputs;
  std::string failure_reason;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& in : inputs) m = std::max(m, in.max_rel_error);
    return m;
  }
};

// Relative error with a unit floor: coordinates whose analytic and numeric
// gradients are both far below 1 are compared absolutely.
inline double gradcheck_rel_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

using ScalarFn = std::function<double(const std::vector<TensorT<double>>&)>;

inline GradCheckReport grad_check(const ScalarFn& fn, std::vector<TensorT<double>> point,
                                  const std::vector<TensorT<double>>& analytic_grads,
                                  const std::vector<std::string>& names,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  report.passed = true;
  Rng rng(mix_seed(opts.seed, 0x67726164));

  for (size_t i = 0; i < point.size(); ++i) {
    GradCheckReport::PerInput per;
    per.name = i < names.size() ? names[i] : ("input" + std::to_string(i));
    const TensorT<double>& analytic = analytic_grads[i];
    if (!analytic.all_finite()) {
      report.passed = false;
      report.failure_reason = "non-finite analytic gradient for " + per.name;
      per.max_rel_error = std::numeric_limits<double>::infinity();
      report.inputs.push_back(per);
      continue;
    }
    const int64_t n = point[i].size();
    std::vector<int64_t> coords;
    if (n <= opts.max_coords_per_input) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) coords[static_cast<size_t>(j)] = j;
    } else {
      for (int64_t j = 0; j < opts.max_coords_per_input; ++j) {
        coords.push_back(static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n))));
      }
    }
    for (int64_t flat : coords) {
      const double saved = point[i][flat];
      point[i][flat] = saved + opts.step;
      const double f_plus = fn(point);
      point[i][flat] = saved - opts.step;
      const double f_minus = fn(point);
      point[i][flat] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double rel = gradcheck_rel_error(analytic[flat], numeric);
      if (rel > per.max_rel_error) {
        per.max_rel_error = rel;
        per.worst_flat_index = flat;
        per.analytic_at_worst = analytic[flat];
        per.numeric_at_worst = numeric;
      }
      ++per.coords_checked;
    }
    if (per.max_rel_error >= opts.tolerance) {
      report.passed = false;
      if (report.failure_reason.empty()) {
        report.failure_reason = per.name + " rel error " + std::to_string(per.max_rel_error) +
                                " at flat index " + std::to_string(per.worst_flat_index);
      }
    }
    report.inputs.push_back(per);
  }
  return report;
}

}  // namespace irnet
