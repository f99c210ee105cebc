#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "apnet/tensor.hpp"

namespace apnet {

struct GradCheckReport {
  struct PerInput {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_coordinate = 0;
  };
  std::vector<PerInput> inputs;
  double max_rel_error = 0.0;
  bool pass = false;
  double tolerance = 0.0;
};

// Compares reverse-mode gradients of a scalar-valued computation against
// central finite differences. `f` must rebuild its graph from the given
// leaves on every call; the checker perturbs leaf data in place.
// Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator so
// near-zero gradients are judged on an absolute scale.
inline GradCheckReport grad_check(
    const std::function<Value<double>(const std::vector<Value<double>>&)>& f,
    std::vector<Value<double>> inputs, double h, double tol,
    const std::vector<std::string>& names = {}) {
  GradCheckReport report;
  report.tolerance = tol;

  Value<double> root = f(inputs);
  APNET_REQUIRE(root.numel() == 1, "grad_check: f must produce a scalar");
  APNET_REQUIRE(std::isfinite(double(root.item())), "grad_check: non-finite f");
  root.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    APNET_REQUIRE(in.requires_grad(), "grad_check: all inputs must require grad");
    std::vector<double> g = in.grad();
    if (g.size() != in.numel()) g.assign(in.numel(), 0.0);  // input unused by f
    analytic.push_back(std::move(g));
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    GradCheckReport::PerInput per;
    per.name = k < names.size() ? names[k] : "input" + std::to_string(k);
    auto& data = inputs[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double fp = f(inputs).item();
      data[i] = saved - h;
      const double fm = f(inputs).item();
      data[i] = saved;
      APNET_REQUIRE(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite f");
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double diff = std::fabs(a - numeric);
      const double rel =
          diff == 0.0 ? 0.0 : diff / std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      if (rel > per.max_rel_error) {
        per.max_rel_error = rel;
        per.worst_coordinate = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, per.max_rel_error);
    report.inputs.push_back(per);
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace apnet
