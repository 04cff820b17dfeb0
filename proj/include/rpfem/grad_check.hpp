#ifndef RPFEM_GRAD_CHECK_HPP_
#define RPFEM_GRAD_CHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rpfem/tensor.hpp"

namespace rpfem {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(),
                       [](const GradCheckEntry& e) { return e.passed; });
  }
  double max_rel_error() const {
    double worst = 0.0;
    for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
    return worst;
  }
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Compares tape gradients of a scalar function with central differences.
///
/// The relative error of one element is |analytic - numeric| / max(|analytic|,
/// |numeric|, 1), the same scaling as Caffe's GradientChecker: relative for
/// large gradients, absolute below one so that round-off on near-zero
/// entries does not dominate.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  std::vector<NamedTensor> inputs, double step = 1e-5,
                                  double tol = 1e-4) {
  if (!(step > 0.0 && step <= 1e-3)) {
    throw ContractError("grad_check: step must lie in (0, 1e-3]");
  }
  for (auto& [name, t] : inputs) {
    if (!t.requires_grad()) throw ContractError("grad_check: input " + name + " has no grad");
    t.zero_grad();
  }
  {
    const Tensor out = f();
    if (out.size() != 1) {
      throw ContractError("grad_check: function output has shape " +
                          shape_str(out.shape()) + ", expected a scalar");
    }
    out.backward();
  }

  GradCheckReport report;
  report.tolerance = tol;
  NoGradGuard no_grad;
  for (auto& [name, t] : inputs) {
    GradCheckEntry entry;
    entry.name = name;
    entry.elements = t.size();
    const NDArray analytic = t.has_grad() ? t.grad() : NDArray(t.shape());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = f().item();
      values[i] = saved - step;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double abs_err = std::abs(analytic.data[i] - numeric);
      const double denom = std::max({std::abs(analytic.data[i]), std::abs(numeric), 1.0});
      const double rel_err = std::isfinite(abs_err) ? abs_err / denom : INFINITY;
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel_err);
    }
    entry.passed = entry.max_rel_error <= tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace rpfem

#endif  // RPFEM_GRAD_CHECK_HPP_
