#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "esr/checkpoint.hpp"
#include "esr/cli.hpp"
#include "esr/error.hpp"
#include "esr/events.hpp"
#include "esr/model.hpp"

using namespace esr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("esr_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& file) const { return (dir / file).string(); }
};

const char* kScene = "kind=moving_bar\nwidth=8\nheight=8\nvelocity_x=1\nn_frames=4\nframe_dt_us=10000\nscale=2\n";

std::vector<std::string> toy_train(const std::string& data, const std::string& ckpt, const std::string& iters) {
  return {"train", "--data", data,  "--ckpt", ckpt, "--scale", "2", "--variant", "plain", "--c", "4",
          "--n",   "1",    "--m", "4",  "--t",  "2",  "--iters", iters, "--seed", "3"};
}

void simulate_into(const Scratch& s, const std::string& data_dir) {
  fs::create_directories(data_dir);
  write(s / "scene.cfg", kScene);
  REQUIRE(run({"simulate", "--scene", s / "scene.cfg", "--out-lr", data_dir + "/bar.lr.events", "--out-hr",
               data_dir + "/bar.hr.events"})
              .code == 0);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"simulate", "--scene", "x", "--out-lr", "a", "--out-hr", "b", "--bogus"}).code == 2);
  CHECK(run({"train", "--data", "d", "--ckpt", "c", "--variant", "huge"}).code == 2);
  CHECK(run({"train", "--data", "d", "--ckpt", "c", "--scale-mode", "sqrt"}).code == 2);
  CHECK(run({"train", "--data", "d"}).code == 2);  // missing --ckpt
  const auto help = run({"--help"});
  CHECK(help.code == 0);
  for (const char* sub : {"simulate", "train", "sr", "eval", "render", "gradcheck", "selftest"})
    CHECK(help.out.find(sub) != std::string::npos);
  CHECK(run({"train", "--help"}).code == 0);
}

TEST_CASE("simulate writes a deterministic LR/HR pair") {
  Scratch s("simulate");
  write(s / "scene.cfg", kScene);
  const auto r = run({"simulate", "--scene", s / "scene.cfg", "--out-lr", s / "a.lr", "--out-hr", s / "a.hr"});
  REQUIRE(r.code == 0);
  const auto lr = events::load_event_file(s / "a.lr");
  const auto hr = events::load_event_file(s / "a.hr");
  CHECK(lr.width() == 4);
  CHECK(hr.width() == 8);
  CHECK(hr.height() == 2 * lr.height());
  CHECK(lr.size() > 0);

  REQUIRE(run({"simulate", "--scene", s / "scene.cfg", "--out-lr", s / "b.lr", "--out-hr", s / "b.hr"}).code == 0);
  CHECK(slurp(s / "a.lr") == slurp(s / "b.lr"));
  CHECK(slurp(s / "a.hr") == slurp(s / "b.hr"));

  REQUIRE(run({"simulate", "--scene", s / "scene.cfg", "--scale", "4", "--out-lr", s / "c.lr", "--out-hr",
               s / "c.hr"})
              .code == 0);
  CHECK(events::load_event_file(s / "c.lr").width() == 2);

  CHECK(run({"simulate", "--scene", s / "missing.cfg", "--out-lr", s / "x", "--out-hr", s / "y"}).code == 1);
  write(s / "bad.cfg", "kind=spiral\n");
  CHECK(run({"simulate", "--scene", s / "bad.cfg", "--out-lr", s / "x", "--out-hr", s / "y"}).code == 1);
}

TEST_CASE("train validates its data directory") {
  Scratch s("train_errors");
  fs::create_directories(s / "empty");
  const auto empty = run(toy_train(s / "empty", s / "m.bmc", "1"));
  CHECK(empty.code == 1);
  CHECK(empty.err.find("no *.lr.events") != std::string::npos);
  CHECK(run(toy_train(s / "nowhere", s / "m.bmc", "1")).code == 1);

  // HR not S times LR.
  simulate_into(s, s / "data");
  auto args = toy_train(s / "data", s / "m.bmc", "1");
  args[6] = "4";  // --scale
  const auto mismatch = run(args);
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("is not 4x LR") != std::string::npos);

  // Missing HR partner.
  fs::create_directories(s / "lonely");
  fs::copy_file(s / "data/bar.lr.events", s / "lonely/bar.lr.events");
  CHECK(run(toy_train(s / "lonely", s / "m.bmc", "1")).code == 1);

  CHECK(run(toy_train(s / "data", s / "m.bmc", "-1")).code == 1);
}

TEST_CASE("train, sr, eval and render end to end") {
  Scratch s("pipeline");
  simulate_into(s, s / "data");

  const auto zero = run(toy_train(s / "data", s / "zero.bmc", "0"));
  REQUIRE(zero.code == 0);
  CHECK(fs::exists(s / "zero.bmc"));
  CHECK(slurp(s / "zero.bmc.loss.csv") == "iter,lr,loss\n");

  auto args = toy_train(s / "data", s / "m.bmc", "4");
  args.insert(args.end(), {"--loss-csv", s / "trace.csv"});
  const auto trained = run(args);
  REQUIRE(trained.code == 0);
  const std::string csv = slurp(s / "trace.csv");
  CHECK(csv.rfind("iter,lr,loss\n1,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  const auto loaded = ckpt::load_model<float>(s / "m.bmc");
  CHECK(loaded.state.iteration == 4);
  CHECK(loaded.header.get_int("lr_width") == 4);
  CHECK(loaded.state.config.channels == 4);

  // sr emits exactly the rounded SR counts.
  const auto sr = run({"sr", "--ckpt", s / "m.bmc", "--in", s / "data/bar.lr.events", "--out", s / "sr.events"});
  REQUIRE(sr.code == 0);
  const auto out = events::load_event_file(s / "sr.events");
  CHECK(out.width() == 8);
  const auto lr = events::load_event_file(s / "data/bar.lr.events");
  const std::size_t n = static_cast<std::size_t>(lr.events().back().t / 10000) + 1;
  const auto frames = events::frame_sequence(lr, 10000, n, 0);
  std::uint64_t expect = 0;
  for (std::size_t start = 0; start < n; start += 2) {
    const std::vector<events::PolarFrame> chunk(frames.begin() + start, frames.begin() + std::min(n, start + 2));
    for (const auto& f : model::super_resolve(loaded.state, chunk))
      for (std::size_t i = 0; i < f.pos.size(); ++i)
        expect += static_cast<std::uint64_t>(std::max(0.0, std::floor(f.pos[i] + 0.5))) +
                  static_cast<std::uint64_t>(std::max(0.0, std::floor(f.neg[i] + 0.5)));
  }
  CHECK(out.size() == expect);
  for (const auto& e : out.events()) CHECK(e.t < static_cast<events::Timestamp>(n * 10000));

  // Empty input gives a header-only file.
  events::save_event_file(s / "empty.events", events::EventStream(4, 4, {}));
  REQUIRE(run({"sr", "--ckpt", s / "m.bmc", "--in", s / "empty.events", "--out", s / "empty_sr.events"}).code == 0);
  const auto empty_sr = events::load_event_file(s / "empty_sr.events");
  CHECK(empty_sr.empty());
  CHECK(empty_sr.width() == 8);

  events::save_event_file(s / "wide.events", events::EventStream(6, 4, {}));
  const auto wrong = run({"sr", "--ckpt", s / "m.bmc", "--in", s / "wide.events", "--out", s / "x.events"});
  CHECK(wrong.code == 1);
  CHECK(wrong.err.find("trained on 4x4") != std::string::npos);
  CHECK(run({"sr", "--ckpt", s / "none.bmc", "--in", s / "empty.events", "--out", s / "x.events"}).code == 1);

  const auto ev = run({"eval", "--ckpt", s / "m.bmc", "--data", s / "data", "--csv", s / "eval.csv"});
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("bicubic") != std::string::npos);
  CHECK(slurp(s / "eval.csv").rfind("method,rmse,params,flops\nbmcnet,", 0) == 0);

  REQUIRE(run({"render", "--in", s / "empty.events", "--out-dir", s / "frames"}).code == 0);
  const std::string ppm = slurp(s / "frames/frame_0000.ppm");
  const std::string header = "P6\n4 4\n255\n";
  REQUIRE(ppm.size() == header.size() + 48);
  CHECK(ppm.substr(0, header.size()) == header);
  CHECK(ppm.find_first_not_of('\xff', header.size()) == std::string::npos);
  REQUIRE(run({"render", "--in", s / "data/bar.hr.events", "--out-dir", s / "hr", "--frames", "3"}).code == 0);
  CHECK(fs::exists(s / "hr/frame_0002.ppm"));
  CHECK_FALSE(fs::exists(s / "hr/frame_0003.ppm"));
}

TEST_CASE("resume continues training from a checkpoint") {
  Scratch s("resume");
  simulate_into(s, s / "data");
  REQUIRE(run(toy_train(s / "data", s / "full.bmc", "6")).code == 0);
  REQUIRE(run(toy_train(s / "data", s / "half.bmc", "3")).code == 0);
  auto args = toy_train(s / "data", s / "resumed.bmc", "6");
  args.insert(args.end(), {"--resume", s / "half.bmc"});
  REQUIRE(run(args).code == 0);
  const auto a = ckpt::load_model<float>(s / "full.bmc");
  const auto b = ckpt::load_model<float>(s / "resumed.bmc");
  CHECK(b.state.iteration == 6);
  bool same = true;
  std::vector<nd::Tensor<float>> va;
  model::visit_parameters(a.state, [&](const std::string&, const nd::Parameter<float>& p) { va.push_back(p.value); });
  std::size_t i = 0;
  model::visit_parameters(b.state, [&](const std::string&, const nd::Parameter<float>& p) {
    same = same && p.value == va[i++];
  });
  CHECK(same);
}

TEST_CASE("selftest and thread override") {
  const auto r = run({"selftest"});
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS") != std::string::npos);

  CHECK(cli::resolve_threads(3) == 3);
  setenv("ESR_FORGE_THREADS", "2", 1);
  CHECK(cli::resolve_threads(5) == 2);
  setenv("ESR_FORGE_THREADS", "zero", 1);
  CHECK_THROWS_AS(cli::resolve_threads(1), ArgumentError);
  CHECK(run({"selftest"}).code == 1);
  unsetenv("ESR_FORGE_THREADS");
  CHECK(run({"--threads", "0", "selftest"}).code == 2);
}
