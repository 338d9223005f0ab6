#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "qf/numerics/rng.hpp"
#include "qf/numerics/tape.hpp"

namespace qf {

struct NamedTensor {
  std::string name;
  DualTensor* tensor;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor of the relative error; keeps vanishing gradients
  /// from turning round-off into large ratios.
  double rel_floor = 1e-5;
  /// When nonzero, probe at most this many randomly chosen entries per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckEntry worst{};
  std::size_t probed = 0;
  bool finite = true;
  std::string diagnostic;

  bool passed(double tol) const { return finite && max_rel_err < tol; }
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares accumulated analytic gradients against central differences.
///
/// `f` must rebuild the whole computation on the tape it is given, binding
/// each checked tensor with Tape::param. The checked tensors' grads are
/// overwritten.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f, const std::vector<NamedTensor>& tensors,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  for (const auto& nt : tensors) nt.tensor->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (!std::isfinite(out.item())) {
      report.finite = false;
      report.diagnostic = "objective is not finite at the probe point";
      return report;
    }
    tape.backward(out);
    tape.accumulate_param_grads();
  }
  auto eval = [&f] {
    Tape tape;
    return f(tape).item();
  };
  RngStream rng(opt.sample_seed);
  for (const auto& nt : tensors) {
    auto& vals = nt.tensor->values();
    std::vector<std::size_t> idx(vals.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_entries_per_tensor && idx.size() > opt.max_entries_per_tensor) {
      for (std::size_t i = 0; i < opt.max_entries_per_tensor; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(opt.max_entries_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double saved = vals[i];
      vals[i] = saved + opt.eps;
      const double up = eval();
      vals[i] = saved - opt.eps;
      const double down = eval();
      vals[i] = saved;
      ++report.probed;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        report.diagnostic = nt.name + "[" + std::to_string(i) + "]: objective not finite under perturbation";
        continue;
      }
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double analytic = nt.tensor->grad()[i];
      const double err = relative_error(analytic, numeric, opt.rel_floor);
      if (err > report.max_rel_err || report.probed == 1) {
        report.max_rel_err = std::max(report.max_rel_err, err);
        if (err >= report.max_rel_err) report.worst = {nt.name, i, analytic, numeric, err};
      }
    }
  }
  return report;
}

}  // namespace qf
