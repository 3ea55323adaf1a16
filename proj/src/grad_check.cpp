#include "esr/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "esr/error.hpp"

namespace esr::nd {

namespace {

double evaluate(const ScalarFn& f) {
  Graph<double> g;
  const Var<double> out = f(g);
  if (out.value().numel() != 1) {
    throw ArgumentError("grad_check: function must return a scalar, got shape " +
                        to_string(out.shape()));
  }
  return out.value()[0];
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFn& f, std::span<Parameter<double>* const> params,
                                  double h) {
  GradCheckOptions options;
  options.h = h;
  options.fallback_steps.clear();
  options.five_point_steps.clear();
  return grad_check_report(f, params, options);
}

GradCheckReport grad_check_report(const ScalarFn& f, std::span<Parameter<double>* const> params,
                                  const GradCheckOptions& options) {
  if (!(options.h > 0)) throw ArgumentError("grad_check: step must be positive");
  for (const auto* steps : {&options.fallback_steps, &options.five_point_steps})
    for (double s : *steps)
      if (!(s > 0)) throw ArgumentError("grad_check: step must be positive");

  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    const Var<double> out = f(g);
    if (out.value().numel() != 1) {
      throw ArgumentError("grad_check: function must return a scalar, got shape " +
                          to_string(out.shape()));
    }
    g.backward(out);
    for (const Parameter<double>* p : params) {
      const Tensor<double>* grad = g.grad_of(*p);
      analytic.push_back(grad ? *grad : Tensor<double>(p->value.shape()));
    }
  }

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<double>& p = *params[k];
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      const double a = analytic[k][i];
      auto measure = [&](double step, double& numeric) {
        p.value[i] = saved + step;
        const double up = evaluate(f);
        p.value[i] = saved - step;
        const double down = evaluate(f);
        p.value[i] = saved;
        numeric = (up - down) / (2.0 * step);
        return std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      };

      // Fourth-order stencil; lets a larger step resolve tiny gradients.
      auto measure5 = [&](double step, double& numeric) {
        double v[4];
        const double offsets[4] = {2 * step, step, -step, -2 * step};
        for (int j = 0; j < 4; ++j) {
          p.value[i] = saved + offsets[j];
          v[j] = evaluate(f);
        }
        p.value[i] = saved;
        numeric = (-v[0] + 8 * v[1] - 8 * v[2] + v[3]) / (12.0 * step);
        return std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      };

      double numeric = 0.0;
      double rel = measure(options.h, numeric);
      if (rel > options.retry_above && !(options.fallback_steps.empty() && options.five_point_steps.empty())) {
        ++report.retried;
        for (double step : options.fallback_steps) {
          double n2 = 0.0;
          const double r2 = measure(step, n2);
          if (r2 < rel) {
            rel = r2;
            numeric = n2;
          }
        }
        for (double step : options.five_point_steps) {
          double n2 = 0.0;
          const double r2 = measure5(step, n2);
          if (r2 < rel) {
            rel = r2;
            numeric = n2;
          }
        }
      }
      ++report.coordinates;
      if (rel > report.max_rel_err || report.coordinates == 1) {
        report.max_rel_err = std::max(report.max_rel_err, rel);
        report.worst_param = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const ScalarFn& f, std::span<Parameter<double>* const> params, double h) {
  return grad_check_report(f, params, h).max_rel_err;
}

}  // namespace esr::nd
