#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "signthought/autodiff.hpp"

namespace signthought {

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-4;
  // Only parameters whose name starts with this prefix are probed.
  std::string prefix;
  // 0 probes every coordinate; otherwise at most this many evenly spaced ones per parameter.
  std::size_t max_coords_per_param = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;  // "name[flat_index]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

// Scalar objective evaluated against the current parameter values.
using Objective = std::function<Var(const ParameterStore&)>;

// Central differences (f(theta+eps) - f(theta-eps)) / (2 eps) per coordinate against
// the reverse-mode gradient; relative error uses a max(|a|, |b|, 1e-8) denominator.
GradCheckReport grad_check(const Objective& f, ParameterStore& store, const GradCheckOptions& opts = {});

// Variant that checks a caller-supplied gradient instead of backward(); used to
// confirm the checker rejects a wrong gradient.
GradCheckReport grad_check_against(const Objective& f, ParameterStore& store, const GradientMap& analytic,
                                   const GradCheckOptions& opts = {});

}  // namespace signthought
