#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "esr/autograd.hpp"

namespace esr::nd {

/// Builds a scalar on the supplied graph from the current parameter values.
using ScalarFn = std::function<Var<double>(Graph<double>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;  // index into the params span
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t retried = 0;  // coordinates that needed a fallback step
};

/// A coordinate whose error at the primary step exceeds `retry_above` is
/// re-measured with each fallback step and keeps its smallest error. Large
/// steps beat round-off on tiny gradients, small steps avoid ReLU kinks
/// inside the stencil; a wrong gradient disagrees at every step.
struct GradCheckOptions {
  double h = 1e-5;
  std::vector<double> fallback_steps{1e-4, 1e-6};      // central differences
  std::vector<double> five_point_steps{1e-3, 1e-2};    // fourth-order stencil
  double retry_above = 1e-6;
};

/// Compares the recorded backward pass against central differences
/// (f(p + h) - f(p - h)) / 2h for every coordinate of every parameter.
/// Relative error is |a - n| / max(1e-8, |a| + |n|).
GradCheckReport grad_check_report(const ScalarFn& f, std::span<Parameter<double>* const> params,
                                  const GradCheckOptions& options);
/// Single step size, no fallback.
GradCheckReport grad_check_report(const ScalarFn& f, std::span<Parameter<double>* const> params,
                                  double h = 1e-5);

double grad_check(const ScalarFn& f, std::span<Parameter<double>* const> params, double h = 1e-5);

}  // namespace esr::nd
