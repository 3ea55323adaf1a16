#include "esr/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "esr/checkpoint.hpp"
#include "esr/error.hpp"
#include "esr/eval.hpp"
#include "esr/events.hpp"
#include "esr/sim.hpp"
#include "esr/train.hpp"
#include "esr/verify.hpp"

namespace esr::cli {

namespace fs = std::filesystem;

namespace {

// Failure that has already been reported to the user; maps to exit 1.
struct Failure {
  std::string message;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path + "' failed");
}

struct DataPair {
  std::string name;
  events::EventStream lr;
  events::EventStream hr;
};

// A data directory holds <name>.lr.events / <name>.hr.events pairs.
std::vector<DataPair> load_data_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Failure{"data directory '" + dir + "' does not exist"};
  const std::string suffix = ".lr.events";
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string file = entry.path().filename().string();
    if (file.size() > suffix.size() && file.compare(file.size() - suffix.size(), suffix.size(), suffix) == 0)
      names.push_back(file.substr(0, file.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw Failure{"data directory '" + dir + "' has no *.lr.events files"};
  std::vector<DataPair> out;
  for (const auto& name : names) {
    const fs::path hr = fs::path(dir) / (name + ".hr.events");
    if (!fs::exists(hr)) throw Failure{"missing " + hr.string() + " for " + name + suffix};
    out.push_back({name, events::load_event_file((fs::path(dir) / (name + suffix)).string()),
                   events::load_event_file(hr.string())});
  }
  return out;
}

std::vector<train::Sample> samples_from(const std::vector<DataPair>& data, std::uint32_t scale,
                                        events::Timestamp window_us, std::size_t T) {
  std::vector<train::Sample> out;
  for (const auto& d : data) {
    if (d.hr.width() != scale * d.lr.width() || d.hr.height() != scale * d.lr.height()) {
      throw Failure{d.name + ": HR " + std::to_string(d.hr.width()) + "x" + std::to_string(d.hr.height()) +
                    " is not " + std::to_string(scale) + "x LR " + std::to_string(d.lr.width()) + "x" +
                    std::to_string(d.lr.height())};
    }
    if (d.lr.width() != data.front().lr.width() || d.lr.height() != data.front().lr.height())
      throw Failure{d.name + ": LR resolution differs from " + data.front().name};
    auto s = train::make_samples(d.lr, d.hr, window_us, T);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

void check_resolution(const KvConfig& header, const events::EventStream& lr) {
  if (!header.has("lr_width")) return;
  const auto w = header.get_int("lr_width"), h = header.get_int("lr_height");
  if (w != lr.width() || h != lr.height()) {
    throw Failure{"input is " + std::to_string(lr.width()) + "x" + std::to_string(lr.height()) +
                  " but the checkpoint was trained on " + std::to_string(w) + "x" + std::to_string(h)};
  }
}

std::size_t frames_covering(const events::EventStream& s, events::Timestamp window_us) {
  if (s.empty()) return 0;
  return static_cast<std::size_t>(s.events().back().t / window_us) + 1;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string scene, out_lr, out_hr;
  std::uint32_t scale = 0;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  sim::SceneConfig cfg = sim::load_scene_config(a.scene);
  if (a.scale != 0) cfg.scale = a.scale;
  const auto pair = sim::make_pair(cfg.spec, cfg.scale, cfg.params);
  events::save_event_file(a.out_lr, pair.lr);
  events::save_event_file(a.out_hr, pair.hr);
  out << "wrote " << pair.lr.size() << " LR events (" << pair.lr.width() << "x" << pair.lr.height() << ") and "
      << pair.hr.size() << " HR events (" << pair.hr.width() << "x" << pair.hr.height() << ")\n";
  return 0;
}

struct TrainArgs {
  std::string data, ckpt, loss_csv, train_config, resume;
  std::uint32_t scale = 4;
  std::string variant = "full";
  std::string scale_mode = "eq2";
  std::size_t c = 128, n = 5, m = 128, t = 9;
  std::int64_t iters = 0;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double lr = 1e-3, decay = 0.95, clip = 1.0;
  std::int64_t decay_every = 4000, checkpoint_every = 0;
  events::Timestamp window_us = 10000;
  double init_gain = 1.0;
  bool no_augment = false, no_carry = false;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::size_t threads, std::ostream& out, std::ostream& err) {
  train::TrainConfig tc;
  if (!a.train_config.empty()) tc = train::TrainConfig::from_kv(KvConfig::load(a.train_config));
  auto given = [&](const char* flag) { return sub.count(flag) > 0 || a.train_config.empty(); };
  if (given("--batch")) tc.batch_size = a.batch;
  if (given("--lr")) tc.lr0 = a.lr;
  if (given("--decay")) tc.decay = a.decay;
  if (given("--decay-every")) tc.decay_every = a.decay_every;
  if (given("--clip")) tc.clip_norm = a.clip;
  if (given("--seed")) tc.seed = a.seed;
  if (sub.count("--no-augment")) tc.augment = false;
  tc.max_iters = a.iters;
  tc.threads = threads;
  tc.checkpoint_every = a.checkpoint_every;
  tc.checkpoint_path = a.ckpt;
  tc.validate();

  model::ModelConfig mc;
  mc.channels = a.c;
  mc.blocks = a.n;
  mc.structures = a.m;
  mc.scale = a.scale;
  mc.window = a.t;
  mc.variant = model::parse_variant(a.variant);
  mc.carry_state = !a.no_carry;
  mc.init_gain = a.init_gain;
  mc.scale_mode = bie::parse_scale_mode(a.scale_mode);
  mc.seed = a.seed;
  mc.validate();

  const auto data = load_data_dir(a.data);
  model::ModelConfig effective = mc;
  if (!a.resume.empty()) effective = ckpt::load_model<float>(a.resume).state.config;
  auto samples = samples_from(data, static_cast<std::uint32_t>(effective.scale), a.window_us, effective.window);

  auto trainer = a.resume.empty() ? train::Trainer(mc, tc, std::move(samples))
                                  : train::Trainer(a.resume, tc, std::move(samples));
  // The first clip is reported in full; later ones are counted in the progress lines.
  bool clip_reported = false;
  trainer.set_log([&](const std::string& line) {
    if (!clip_reported) err << line << '\n';
    clip_reported = true;
  });
  // Recorded so `sr` and `eval` can reject inputs of another resolution.
  KvConfig extra;
  extra.set("lr_width", std::to_string(data.front().lr.width()));
  extra.set("lr_height", std::to_string(data.front().lr.height()));
  extra.set("window_us", std::to_string(a.window_us));
  trainer.set_header(extra);

  const std::int64_t report_every = std::max<std::int64_t>(1, a.iters / 20);
  std::int64_t clipped = 0;
  while (trainer.state().iteration < tc.max_iters) {
    const auto rec = trainer.step();
    clipped += rec.clipped;
    if (rec.iter % report_every == 0 || rec.iter == tc.max_iters) {
      err << "iter " << rec.iter << "  lr " << rec.lr << "  loss " << rec.loss;
      if (clipped > 0) err << "  clipped " << clipped << "x";
      err << '\n';
      clipped = 0;
    }
    if (tc.checkpoint_every > 0 && rec.iter % tc.checkpoint_every == 0 && rec.iter < tc.max_iters)
      trainer.save(a.ckpt);
  }
  trainer.save(a.ckpt);
  const std::string csv_path = a.loss_csv.empty() ? a.ckpt + ".loss.csv" : a.loss_csv;
  write_text(csv_path, train::loss_csv(trainer.trace()));
  out << "trained " << trainer.state().iteration << " iterations on " << data.size() << " sequence(s); params "
      << model::count_params(trainer.state()) << "; checkpoint " << a.ckpt << ", loss trace " << csv_path << '\n';
  return 0;
}

struct SrArgs {
  std::string ckpt, in, out;
  events::Timestamp window_us = 10000;
  std::size_t t = 0;
};

int cmd_sr(const SrArgs& a, std::ostream& out) {
  const auto loaded = ckpt::load_model<float>(a.ckpt);
  const auto& state = loaded.state;
  const auto S = static_cast<std::uint32_t>(state.config.scale);
  const auto lr = events::load_event_file(a.in);
  check_resolution(loaded.header, lr);
  if (a.window_us < 1) throw Failure{"--window-us must be >= 1"};
  const std::size_t T = a.t > 0 ? a.t : state.config.window;

  const std::size_t n = frames_covering(lr, a.window_us);
  const auto frames = n == 0 ? std::vector<events::PolarFrame>{} : events::frame_sequence(lr, a.window_us, n, 0);
  std::vector<events::Event> all;
  std::uint64_t total = 0;
  // Windows of T frames, each starting from zero state.
  for (std::size_t start = 0; start < frames.size(); start += T) {
    const std::vector<events::PolarFrame> chunk(frames.begin() + start,
                                                frames.begin() + std::min(frames.size(), start + T));
    for (const auto& f : model::super_resolve(state, chunk)) {
      const auto s = events::resample(f);
      total += s.size();
      all.insert(all.end(), s.events().begin(), s.events().end());
    }
  }
  const events::EventStream result(lr.width() * S, lr.height() * S, std::move(all));
  events::save_event_file(a.out, result);
  out << "wrote " << total << " events at " << result.width() << "x" << result.height() << " from " << lr.size()
      << " input events (" << frames.size() << " frames)\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, csv;
  events::Timestamp window_us = 10000;
  std::size_t t = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto loaded = ckpt::load_model<float>(a.ckpt);
  const auto data = load_data_dir(a.data);
  check_resolution(loaded.header, data.front().lr);
  const std::size_t T = a.t > 0 ? a.t : loaded.state.config.window;
  const auto samples =
      samples_from(data, static_cast<std::uint32_t>(loaded.state.config.scale), a.window_us, T);
  const auto report = eval::evaluate(loaded.state, samples);
  out << report.to_table();
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  return 0;
}

struct RenderArgs {
  std::string in, out_dir;
  events::Timestamp window_us = 10000;
  std::size_t frames = 0;
};

int cmd_render(const RenderArgs& a, std::ostream& out) {
  const auto s = events::load_event_file(a.in);
  if (a.window_us < 1) throw Failure{"--window-us must be >= 1"};
  const std::size_t n = a.frames > 0 ? a.frames : std::max<std::size_t>(1, frames_covering(s, a.window_us));
  fs::create_directories(a.out_dir);
  const auto frames = events::frame_sequence(s, a.window_us, n, 0);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.ppm", i);
    eval::render_frame(frames[i], (fs::path(a.out_dir) / name).string());
  }
  out << "wrote " << frames.size() << " frame(s) to " << a.out_dir << '\n';
  return 0;
}

int report_checks(const std::vector<verify::CheckResult>& results, std::ostream& out, std::ostream& err) {
  for (const auto& r : results) out << verify::format_result(r) << '\n';
  for (const auto& r : results) {
    if (!r.passed) {
      err << "first failure: " << r.name << (r.detail.empty() ? "" : ": " + r.detail) << '\n';
      return 1;
    }
  }
  return 0;
}

}  // namespace

std::size_t resolve_threads(std::size_t flag_value) {
  if (const char* env = std::getenv("ESR_FORGE_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ArgumentError(std::string("ESR_FORGE_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return flag_value;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event-stream super-resolution toolkit", "esr-forge"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads (ESR_FORGE_THREADS overrides)")
      ->check(CLI::PositiveNumber);

  SimulateArgs sim_args;
  auto* simulate = app.add_subcommand("simulate", "Synthesize an LR/HR event-stream pair from a scene file");
  simulate->add_option("--scene", sim_args.scene, "Scene key=value file")->required();
  simulate->add_option("--scale", sim_args.scale, "Override the scene's scale factor");
  simulate->add_option("--out-lr", sim_args.out_lr, "LR event file")->required();
  simulate->add_option("--out-hr", sim_args.out_hr, "HR event file")->required();
  simulate->add_option("--seed", sim_args.seed, "Accepted for uniform scripting; simulation is deterministic");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a directory of LR/HR pairs");
  train_cmd->add_option("--data", tr.data, "Directory of <name>.lr.events / <name>.hr.events")->required();
  train_cmd->add_option("--ckpt", tr.ckpt, "Checkpoint to write")->required();
  train_cmd->add_option("--scale", tr.scale, "Upscaling factor S")->capture_default_str();
  train_cmd->add_option("--variant", tr.variant, "Network variant")
      ->check(CLI::IsMember({"mixed", "plain", "full"}))
      ->capture_default_str();
  train_cmd->add_option("--c", tr.c, "Feature channels C")->capture_default_str();
  train_cmd->add_option("--n", tr.n, "Layers N")->capture_default_str();
  train_cmd->add_option("--m", tr.m, "Global structures M")->capture_default_str();
  train_cmd->add_option("--t", tr.t, "Frames per training window T")->capture_default_str();
  train_cmd->add_option("--iters", tr.iters, "Training iterations")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Seed for initialization, shuffling and augmentation");
  train_cmd->add_option("--batch", tr.batch, "Sequences per iteration")->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--decay", tr.decay, "Learning-rate decay factor")->capture_default_str();
  train_cmd->add_option("--decay-every", tr.decay_every, "Iterations per decay step")->capture_default_str();
  train_cmd->add_option("--clip", tr.clip, "Global gradient-norm clip (0 disables)")->capture_default_str();
  train_cmd->add_option("--window-us", tr.window_us, "Frame length in microseconds")->capture_default_str();
  train_cmd->add_option("--scale-mode", tr.scale_mode, "Attention scaling")
      ->check(CLI::IsMember({"eq2", "pseudocode"}))
      ->capture_default_str();
  train_cmd->add_option("--loss-csv", tr.loss_csv, "Loss trace (default: <ckpt>.loss.csv)");
  train_cmd->add_option("--train-config", tr.train_config, "key=value training config; flags override it");
  train_cmd->add_option("--resume", tr.resume, "Continue from this checkpoint");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Also checkpoint every K iterations");
  train_cmd->add_flag("--no-augment", tr.no_augment, "Disable flips and polarity inversion");
  train_cmd->add_flag("--no-carry", tr.no_carry, "Reset recurrent state every frame");
  train_cmd->add_option("--init-gain", tr.init_gain, "Conv init bound is sqrt(gain / fan_in)")
      ->check(CLI::PositiveNumber);

  SrArgs sr;
  auto* sr_cmd = app.add_subcommand("sr", "Super-resolve an LR event file");
  sr_cmd->add_option("--ckpt", sr.ckpt, "Trained checkpoint")->required();
  sr_cmd->add_option("--in", sr.in, "LR event file")->required();
  sr_cmd->add_option("--out", sr.out, "HR event file to write")->required();
  sr_cmd->add_option("--window-us", sr.window_us, "Frame length in microseconds")->capture_default_str();
  sr_cmd->add_option("--t", sr.t, "Frames per recurrent window (default: checkpoint T)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Compare a checkpoint against bicubic upsampling");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Trained checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Directory of LR/HR pairs")->required();
  eval_cmd->add_option("--window-us", ev.window_us, "Frame length in microseconds")->capture_default_str();
  eval_cmd->add_option("--t", ev.t, "Frames per window (default: checkpoint T)");
  eval_cmd->add_option("--csv", ev.csv, "Also write method,rmse,params,flops here");

  RenderArgs rd;
  auto* render_cmd = app.add_subcommand("render", "Render count frames of an event file as PPM images");
  render_cmd->add_option("--in", rd.in, "Event file")->required();
  render_cmd->add_option("--out-dir", rd.out_dir, "Output directory")->required();
  render_cmd->add_option("--window-us", rd.window_us, "Frame length in microseconds")->capture_default_str();
  render_cmd->add_option("--frames", rd.frames, "Number of frames (default: cover the stream)");

  std::size_t grad_seeds = 5;
  double grad_tol = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient (64-bit)");
  grad_cmd->add_option("--seeds", grad_seeds, "Number of seeds")->check(CLI::PositiveNumber)->capture_default_str();
  grad_cmd->add_option("--tolerance", grad_tol, "Maximum relative error")->capture_default_str();

  std::uint64_t self_seed = 7;
  auto* self_cmd = app.add_subcommand("selftest", "Run the invariant suites");
  self_cmd->add_option("--seed", self_seed, "Seed for the randomized checks")->capture_default_str();

  std::vector<std::string> argv_store{"esr-forge"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run 'esr-forge --help' for usage\n";
    return 2;
  }

  try {
    threads = resolve_threads(threads);
    if (simulate->parsed()) return cmd_simulate(sim_args, out);
    if (train_cmd->parsed()) return cmd_train(tr, *train_cmd, threads, out, err);
    if (sr_cmd->parsed()) return cmd_sr(sr, out);
    if (eval_cmd->parsed()) return cmd_eval(ev, out);
    if (render_cmd->parsed()) return cmd_render(rd, out);
    if (grad_cmd->parsed()) {
      verify::GradSuiteOptions opt;
      opt.seeds.clear();
      for (std::size_t i = 1; i <= grad_seeds; ++i) opt.seeds.push_back(i);
      opt.tolerance = grad_tol;
      return report_checks(verify::gradient_suite(opt), out, err);
    }
    if (self_cmd->parsed()) return report_checks(verify::invariant_suite(self_seed), out, err);
  } catch (const Failure& f) {
    err << "error: " << f.message << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace esr::cli
