#include <doctest.h>

#include <random>

#include "esr/error.hpp"
#include "esr/grad_check.hpp"
#include "esr/ops.hpp"
#include "esr/verify.hpp"

using namespace esr;
using namespace esr::nd;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// y = 2x with a backward that claims dy/dx = 3.
Var<double> wrong_double(Var<double> x) {
  auto& g = x.graph();
  Tensor<double> out = x.value();
  for (auto& v : out.data()) v *= 2.0;
  const std::size_t in = x.id();
  return g.record(std::move(out), {in}, [in](Graph<double>& gr, std::size_t self) {
    const Tensor<double> up = gr.grad(self);
    auto& dst = gr.grad(in);
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += 3.0 * up[i];
  });
}

}  // namespace

TEST_CASE("grad_check on a linear function is exact") {
  Parameter<double> x(random_tensor({2, 3}, 1));
  std::vector<Parameter<double>*> params{&x};
  const double err = grad_check([&](Graph<double>& g) { return sum(g.param(x)); }, params);
  CHECK(err < 1e-9);
}

TEST_CASE("grad_check of squared sigmoid-conv sum stays within 1e-4") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Parameter<double> x(random_tensor({1, 1, 2, 2}, seed + 10));
    Parameter<double> k(random_tensor({1, 1, 3, 3}, seed + 20));
    Parameter<double> b(random_tensor({1}, seed + 30));
    std::vector<Parameter<double>*> params{&x, &k, &b};
    const double err = grad_check(
        [&](Graph<double>& g) {
          const auto s = sum(sigmoid(conv2d<double>(g.param(x), g.param(k), g.param(b))));
          return mul(s, s);
        },
        params);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("unused parameters get exactly zero gradient") {
  Parameter<double> used(random_tensor({3}, 2));
  Parameter<double> unused(random_tensor({3}, 3));
  Graph<double> g;
  g.param(unused);
  const auto out = sum_squares(g.param(used));
  g.backward(out);
  CHECK(g.grad_of(unused) == nullptr);

  std::vector<Parameter<double>*> params{&used, &unused};
  const auto report = grad_check_report([&](Graph<double>& gr) { return sum_squares(gr.param(used)); }, params);
  CHECK(report.max_rel_err < 1e-8);
  CHECK(report.coordinates == 6);
}

TEST_CASE("grad_check rejects non-scalar functions") {
  Parameter<double> x(random_tensor({3}, 4));
  std::vector<Parameter<double>*> params{&x};
  CHECK_THROWS_AS(grad_check([&](Graph<double>& g) { return g.param(x); }, params), ArgumentError);
}

TEST_CASE("grad_check flags a wrong backward at every step size") {
  Parameter<double> x(random_tensor({4}, 5));
  std::vector<Parameter<double>*> params{&x};
  const auto fn = [&](Graph<double>& g) { return sum(wrong_double(g.param(x))); };
  const auto report = grad_check_report(fn, params, GradCheckOptions{});
  CHECK(report.max_rel_err == doctest::Approx(0.2));  // |3 - 2| / (3 + 2)
  CHECK(report.retried == 4);
}

TEST_CASE("fallback steps rescue a ReLU kink inside the primary stencil") {
  // relu(x) at x = 5e-6: the h = 1e-5 stencil straddles the kink, h = 1e-6 does not.
  Parameter<double> x(Tensor<double>({1}, std::vector<double>{5e-6}));
  std::vector<Parameter<double>*> params{&x};
  const auto fn = [&](Graph<double>& g) { return sum(relu(g.param(x))); };
  CHECK(grad_check_report(fn, params, 1e-5).max_rel_err > 0.1);
  const auto rescued = grad_check_report(fn, params, GradCheckOptions{});
  CHECK(rescued.max_rel_err < 1e-9);
  CHECK(rescued.retried == 1);
}

TEST_CASE("gradient suite over ops and the exchange block") {
  verify::GradSuiteOptions opts;
  opts.include_model = false;
  const auto results = verify::gradient_suite(opts);
  CHECK(results.size() >= 20);
  for (const auto& r : results) {
    INFO(verify::format_result(r));
    CHECK(r.passed);
    CHECK(r.value <= 1e-4);
  }
}
