#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Self-check suites behind `esr-forge gradcheck` / `selftest` and the
// acceptance run. Every check compares against a brute-force or closed-form
// oracle written independently of the code under test.
namespace esr::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;  // max relative error for gradient checks, max deviation otherwise
  std::string detail;
};

struct GradSuiteOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double tolerance = 1e-4;
  bool include_model = true;  // loss_window . forward_sequence on the toy config
};

/// Central-difference checks of every differentiable op, the exchange block
/// (both attention scalings) and the end-to-end training loss, 64-bit.
/// One result per check, reporting the worst seed.
std::vector<CheckResult> gradient_suite(const GradSuiteOptions& options = {});

/// Invariant families, one result each.
std::vector<CheckResult> invariant_suite(std::uint64_t seed = 7);

bool all_passed(const std::vector<CheckResult>& results);
std::string format_result(const CheckResult& r);

}  // namespace esr::verify
