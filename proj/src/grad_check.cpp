#include "signthought/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace signthought {

namespace {

double eval_scalar(const Objective& f, const ParameterStore& store) {
  const Var out = f(store);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check_against(const Objective& f, ParameterStore& store, const GradientMap& analytic,
                                   const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  GradCheckReport report;
  for (auto& entry : store) {
    if (!entry.name.starts_with(opts.prefix)) continue;
    Tensor& theta = entry.var.mutable_value();
    const Tensor& g = analytic.at(entry.name);
    const std::size_t n = theta.size();
    std::size_t stride = 1;
    if (opts.max_coords_per_param > 0 && n > opts.max_coords_per_param) {
      stride = (n + opts.max_coords_per_param - 1) / opts.max_coords_per_param;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = theta[i];
      theta[i] = saved + opts.eps;
      const double up = eval_scalar(f, store);
      theta[i] = saved - opts.eps;
      const double down = eval_scalar(f, store);
      theta[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = g[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (report.worst_param.empty() || rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = entry.name + "[" + std::to_string(i) + "]";
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_err < opts.tol;
  return report;
}

GradCheckReport grad_check(const Objective& f, ParameterStore& store, const GradCheckOptions& opts) {
  const Var loss = f(store);
  const GradientMap analytic = backward(loss, store);
  return grad_check_against(f, store, analytic, opts);
}

}  // namespace signthought
