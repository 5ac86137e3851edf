#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ordmoe/autodiff.hpp"
#include "ordmoe/common.hpp"

namespace ordmoe {

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  std::size_t loss_evals = 0;
  std::vector<GradCheckEntry> failures;  // first few offenders past tolerance

  std::string to_string() const {
    std::ostringstream os;
    os << (pass ? "ok" : "FAILED") << ": max rel err " << max_rel_err << " at " << worst.param
       << "[" << worst.index << "] (analytic " << worst.analytic << ", numeric "
       << worst.numeric << "), " << checked << " entries, " << loss_evals << " loss evals";
    return os.str();
  }
};

/// Compare analytic gradients of a scalar loss against central differences.
///
/// The loss closure must rebuild its graph from the current parameter values
/// on every call. Relative error uses a floor in the denominator so that
/// near-zero gradients are judged against finite-difference noise (~1e-9 at
/// the default epsilon) rather than against each other.
///
/// max_coords_per_param = 0 checks every coordinate; a positive value checks
/// an evenly strided deterministic subset of each tensor (always including
/// coordinate 0), trading coverage for runtime on larger models.
template <class Real>
GradCheckReport finite_diff_check(
    const std::vector<std::pair<std::string, Tensor<Real>>>& params,
    const std::function<Tensor<Real>()>& loss_fn, Real epsilon = Real(1e-5),
    double rel_tol = 1e-4, double denom_floor = 1e-4, std::size_t max_failures = 8,
    std::size_t max_coords_per_param = 0) {
  GradCheckReport report;

  for (const auto& [name, p] : params) p.zero_grad();
  Tensor<Real> loss = loss_fn();
  ++report.loss_evals;
  backward(loss);

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    if (p.grad().empty())
      analytic.emplace_back(p.numel(), Real(0));
    else
      analytic.push_back(p.grad());
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor<Real> param = params[pi].second;
    auto& vals = param.value();
    std::size_t stride = 1;
    if (max_coords_per_param > 0 && vals.size() > max_coords_per_param)
      stride = (vals.size() + max_coords_per_param - 1) / max_coords_per_param;
    for (std::size_t i = 0; i < vals.size(); i += stride) {
      const Real orig = vals[i];
      vals[i] = orig + epsilon;
      const double f_plus = static_cast<double>(loss_fn().item());
      vals[i] = orig - epsilon;
      const double f_minus = static_cast<double>(loss_fn().item());
      vals[i] = orig;
      report.loss_evals += 2;

      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(epsilon));
      const double an = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(an), std::abs(numeric), denom_floor});
      const double rel = std::abs(an - numeric) / denom;

      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = {name, i, an, numeric, rel};
      }
      if (rel > rel_tol) {
        report.pass = false;
        if (report.failures.size() < max_failures)
          report.failures.push_back({name, i, an, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace ordmoe
