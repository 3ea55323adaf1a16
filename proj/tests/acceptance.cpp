// One PASS/FAIL line per acceptance criterion. Exit status is non-zero if any
// gating criterion fails; the parameter-count report is informational.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "esr/cli.hpp"
#include "esr/eval.hpp"
#include "esr/model.hpp"
#include "esr/sim.hpp"
#include "esr/train.hpp"
#include "esr/verify.hpp"

using namespace esr;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120.0;
constexpr std::int64_t kOverfitIters = 2000;
constexpr double kOverfitRatio = 0.10;
constexpr double kOverfitBudgetSeconds = 600.0;
constexpr double kBicubicRatio = 0.70;
constexpr std::int64_t kAblationIters = 100;

int failures = 0;

void report(int id, bool gating, bool passed, const std::string& what, const std::string& detail) {
  const char* tag = !gating ? "INFO" : passed ? "PASS" : "FAIL";
  std::printf("[%s] criterion %d: %s | %s\n", tag, id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (gating && !passed) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void gradient_criterion() {
  const auto t0 = std::chrono::steady_clock::now();
  verify::GradSuiteOptions opts;
  opts.tolerance = kGradTolerance;
  const auto results = verify::gradient_suite(opts);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : results) {
    if (r.value >= worst) {
      worst = r.value;
      worst_name = r.name;
    }
    if (!r.passed) std::printf("  %s\n", verify::format_result(r).c_str());
  }
  const bool ok = verify::all_passed(results) && worst <= kGradTolerance && secs < kGradBudgetSeconds &&
                  opts.seeds.size() >= 5;
  report(1, true, ok, "gradient suite, 64-bit, " + std::to_string(opts.seeds.size()) + " seeds",
         std::to_string(results.size()) + " checks, max rel err " + fmt("%.3g", worst) + " (" + worst_name +
             ") <= 1e-4, " + fmt("%.1f", secs) + " s < 120 s");
}

// Criteria 2 and 3 share the overfit run.
void overfit_criteria() {
  sim::SceneSpec scene;
  scene.kind = sim::SceneKind::moving_bar;
  scene.width = 16;
  scene.height = 16;
  scene.velocity_x = 1.0;
  scene.n_frames = 10;
  scene.frame_dt_us = 10000;
  const auto pair = sim::make_pair(scene, 2, sim::SimParams{});

  model::ModelConfig mc;
  mc.variant = model::Variant::plain;
  mc.channels = 16;
  mc.blocks = 2;
  mc.structures = 16;
  mc.window = 3;
  mc.scale = 2;
  mc.seed = 1;
  train::TrainConfig tc;
  tc.max_iters = kOverfitIters;
  tc.seed = 1;
  tc.threads = 1;

  const auto samples = train::make_samples(pair.lr, pair.hr, scene.frame_dt_us, mc.window);
  const auto t0 = std::chrono::steady_clock::now();
  train::TrainResult run;
  bool finite = true;
  std::string error;
  try {
    run = train::train(samples, mc, tc);
  } catch (const std::exception& e) {
    finite = false;
    error = e.what();
  }
  const double secs = seconds_since(t0);
  if (!finite) {
    report(2, true, false, "overfit sanity", "training aborted: " + error);
    report(3, true, false, "beats bicubic", "no trained model");
    return;
  }
  const double first = run.trace.front().loss;
  const double last = run.trace.back().loss;
  // Trailing mean guards against a lucky final batch.
  const std::size_t tail = std::min<std::size_t>(50, run.trace.size());
  double tail_mean = 0.0;
  for (std::size_t i = run.trace.size() - tail; i < run.trace.size(); ++i) tail_mean += run.trace[i].loss;
  tail_mean /= static_cast<double>(tail);
  const bool ok2 = last < kOverfitRatio * first && tail_mean < kOverfitRatio * first &&
                   secs < kOverfitBudgetSeconds;
  report(2, true, ok2,
         "overfit sanity, plain C=16 N=2 M=16 T=3 S=2, " + std::to_string(samples.size()) +
             " windows of one moving_bar sequence, " + std::to_string(run.trace.size()) + " iterations",
         "loss iter 1 " + fmt("%.4g", first) + ", final " + fmt("%.4g", last) + ", last-" + std::to_string(tail) +
             " mean " + fmt("%.4g", tail_mean) + " (ratio " + fmt("%.4f", tail_mean / first) + " < 0.10), " +
             fmt("%.1f", secs) + " s < 600 s");

  const auto ev = eval::evaluate(run.state, samples);
  const double net = ev.at("bmcnet").rmse, base = ev.at("bicubic").rmse;
  report(3, true, net <= kBicubicRatio * base, "overfit model beats bicubic on its training sequence",
         "rmse model " + fmt("%.4f", net) + ", bicubic " + fmt("%.4f", base) + ", ratio " + fmt("%.3f", net / base) +
             " <= 0.70");
}

void invariant_criterion() {
  const auto results = verify::invariant_suite(7);
  std::string failed;
  for (const auto& r : results)
    if (!r.passed) failed += " " + r.name + ";";
  report(4, true, verify::all_passed(results) && results.size() >= 13, "invariant suites",
         std::to_string(results.size()) + " families" + (failed.empty() ? ", all pass" : ", failed:" + failed));
}

void ablation_criterion() {
  struct Config {
    const char* name;
    model::Variant variant;
    bool carry;
  };
  const Config configs[] = {{"Exp0 mixed, no recurrence", model::Variant::mixed, false},
                            {"Exp1 mixed, recurrent", model::Variant::mixed, true},
                            {"Exp3 plain, no recurrence", model::Variant::plain, false},
                            {"Exp4 plain", model::Variant::plain, true},
                            {"Exp5 full", model::Variant::full, true}};

  sim::SceneSpec scene;
  scene.width = 10;
  scene.height = 10;
  scene.n_frames = 6;
  const auto pair = sim::make_pair(scene, 2, sim::SimParams{});
  const auto samples = train::make_samples(pair.lr, pair.hr, scene.frame_dt_us, 2);
  const auto probe = events::frame_sequence(pair.lr, scene.frame_dt_us, 3, 0);

  std::vector<std::vector<events::PolarFrame>> outputs;
  bool ok = true;
  std::string detail;
  for (const auto& c : configs) {
    model::ModelConfig mc;
    mc.channels = 4;
    mc.blocks = 1;
    mc.structures = 4;
    mc.scale = 2;
    mc.window = 2;
    mc.variant = c.variant;
    mc.carry_state = c.carry;
    mc.seed = 3;
    train::TrainConfig tc;
    tc.max_iters = kAblationIters;
    tc.seed = 3;
    try {
      const auto r = train::train(samples, mc, tc);
      const bool finite =
          std::all_of(r.trace.begin(), r.trace.end(), [](const auto& rec) { return std::isfinite(rec.loss); });
      ok = ok && finite && r.trace.size() == static_cast<std::size_t>(kAblationIters);
      outputs.push_back(model::super_resolve(r.state, probe));
      detail += std::string(c.name) + " loss " + fmt("%.3g", r.trace.back().loss) + "; ";
    } catch (const std::exception& e) {
      ok = false;
      detail += std::string(c.name) + " failed: " + e.what() + "; ";
      outputs.emplace_back();
    }
  }
  std::size_t identical = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i)
    for (std::size_t j = i + 1; j < outputs.size(); ++j)
      if (outputs[i] == outputs[j]) ++identical;
  ok = ok && identical == 0;
  report(5, true, ok, "ablation toggles build, train 100 iterations, pairwise-distinct outputs",
         detail + std::to_string(identical) + " identical pairs");
}

void param_count_criterion() {
  auto count = [](model::Variant v, std::size_t M) {
    model::ModelConfig c;
    c.variant = v;
    c.channels = 128;
    c.blocks = 5;
    c.structures = M;
    c.scale = 4;
    return model::count_params(model::init_model<float>(c));
  };
  const auto full = count(model::Variant::full, 128), plain = count(model::Variant::plain, 128);
  const double full_dev = static_cast<double>(full) / 2.72e6 - 1.0;
  const double plain_dev = static_cast<double>(plain) / 1.00e6 - 1.0;
  report(6, false, true, "parameter counts at C=128 N=5 M=128 S=4",
         "full " + std::to_string(full) + " vs 2.72M (" + fmt("%+.0f%%", 100 * full_dev) + "), plain " +
             std::to_string(plain) + " vs 1.00M (" + fmt("%+.0f%%", 100 * plain_dev) + ")");
  std::string sweep;
  for (std::size_t M : {8, 16, 32, 64, 128, 256, 512})
    sweep += "M=" + std::to_string(M) + " " + std::to_string(count(model::Variant::plain, M)) + "; ";
  const double slope = static_cast<double>(count(model::Variant::plain, 512) - count(model::Variant::plain, 8)) / 504.0;
  report(6, false, true, "plain M sweep",
         sweep + "slope " + fmt("%.0f", slope) + " params per unit M (reference sweep 335.6K..778.7K, slope 879)");
}

void determinism_criterion() {
  const fs::path dir = fs::current_path() / "acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "scene.cfg");
    f << "kind=moving_bar\nwidth=12\nheight=12\nvelocity_x=1\nn_frames=5\nframe_dt_us=10000\nscale=2\n";
  }
  auto cli = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    if (code != 0) std::printf("  esr-forge exit %d: %s", code, err.str().c_str());
    return code == 0;
  };
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const std::string r(run);
    fs::create_directories(dir / ("data_" + r));
    ok = ok && cli({"--threads", "1", "simulate", "--scene", p("scene.cfg"), "--out-lr", p("data_" + r + "/s.lr.events"),
                    "--out-hr", p("data_" + r + "/s.hr.events")});
    ok = ok && cli({"--threads", "1", "train", "--data", p("data_" + r), "--ckpt", p(r + ".bmc"), "--scale", "2",
                    "--variant", "full", "--c", "4", "--n", "1", "--m", "4", "--t", "2", "--iters", "5", "--seed",
                    "9", "--loss-csv", p(r + ".csv")});
    ok = ok && cli({"--threads", "1", "sr", "--ckpt", p(r + ".bmc"), "--in", p("data_" + r + "/s.lr.events"), "--out",
                    p(r + ".sr.events")});
  }
  std::string detail;
  const std::pair<std::string, std::string> files[] = {{"data_a/s.lr.events", "data_b/s.lr.events"},
                                                       {"data_a/s.hr.events", "data_b/s.hr.events"},
                                                       {"a.bmc", "b.bmc"},
                                                       {"a.csv", "b.csv"},
                                                       {"a.sr.events", "b.sr.events"}};
  for (const auto& [x, y] : files) {
    const std::string bx = slurp(dir / x), by = slurp(dir / y);
    const bool same = !bx.empty() && bx == by;
    ok = ok && same;
    detail += fs::path(x).filename().string() + (same ? " identical; " : " DIFFERS; ");
  }
  report(7, true, ok, "simulate, train and sr are byte-deterministic with --threads 1", detail);
  fs::remove_all(dir);
}

}  // namespace

int main() {
  gradient_criterion();
  overfit_criteria();
  invariant_criterion();
  ablation_criterion();
  param_count_criterion();
  determinism_criterion();
  std::printf("%s: %d gating criterion failure(s)\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
