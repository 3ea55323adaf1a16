#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "esr/events.hpp"
#include "esr/kv_config.hpp"
#include "esr/model.hpp"

namespace esr::train {

using events::PolarFrame;

struct TrainConfig {
  std::size_t batch_size = 2;
  double lr0 = 1e-3;
  double decay = 0.95;
  std::int64_t decay_every = 4000;
  std::int64_t max_iters = 0;
  bool augment = true;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;          // global gradient norm; <= 0 disables
  std::size_t threads = 1;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  std::string checkpoint_path;        // empty: no checkpoints

  void validate() const;
  KvConfig to_kv() const;
  /// Missing keys keep their defaults.
  static TrainConfig from_kv(const KvConfig& kv);
};

/// T aligned LR / HR count frames.
struct Sample {
  std::vector<PolarFrame> lr_frames;
  std::vector<PolarFrame> hr_frames;
};

/// Checks equal lengths and hr = scale x lr dims; ShapeError otherwise.
void validate_sample(const Sample& s, std::size_t scale);

/// Frames both streams with `window_us` bins starting at t = 0 and returns
/// every run of `T` consecutive frames (stride 1). Short recordings give one
/// sample padded with empty frames.
std::vector<Sample> make_samples(const events::EventStream& lr, const events::EventStream& hr,
                                 events::Timestamp window_us, std::size_t T);

/// Sum over frames of the per-frame mean squared error over both channels.
template <typename T>
nd::Var<T> loss_window(const std::vector<nd::Var<T>>& sr, const std::vector<nd::Var<T>>& hr);
double loss_window(const std::vector<PolarFrame>& sr, const std::vector<PolarFrame>& hr);

double lr_at(std::int64_t iter, const TrainConfig& cfg);

struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  bool swap_polarity = false;
};

AugmentDraw draw_augment(std::mt19937_64& rng);
PolarFrame flip_horizontal(const PolarFrame& f);
PolarFrame flip_vertical(const PolarFrame& f);
PolarFrame swap_polarity(const PolarFrame& f);
Sample apply_augment(const Sample& s, const AugmentDraw& draw);
Sample augment(const Sample& s, std::mt19937_64& rng);

template <typename T>
struct AdamState {
  std::vector<nd::Tensor<T>> m;
  std::vector<nd::Tensor<T>> v;
  std::int64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// One bias-corrected Adam update from p.grad, then zeroes the gradients.
template <typename T>
void optimizer_step(std::span<nd::Parameter<T>* const> params, AdamState<T>& adam, double lr);

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::span<nd::Parameter<T>* const> params, double max_norm);

struct LossRecord {
  std::int64_t iter = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

std::string loss_csv(const std::vector<LossRecord>& trace);

/// Seed for an independent RNG stream identified by (purpose, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index);

using Model = model::ModelState<float>;
using LogFn = std::function<void(const std::string&)>;

/// Owns the model and optimizer state. Every random choice of iteration i is
/// a pure function of (seed, i), so a run resumed from a checkpoint follows
/// the uninterrupted run exactly.
class Trainer {
 public:
  Trainer(const model::ModelConfig& model_cfg, const TrainConfig& cfg, std::vector<Sample> dataset);
  /// Resumes model, optimizer state and iteration counter from a checkpoint.
  Trainer(const std::string& checkpoint, const TrainConfig& cfg, std::vector<Sample> dataset);

  /// Runs one iteration and returns its record; throws NumericError on a
  /// non-finite loss.
  LossRecord step();
  /// Runs until state().iteration == cfg.max_iters, writing checkpoints as configured.
  void run();
  void save(const std::string& path) const;

  const Model& state() const { return state_; }
  const std::vector<LossRecord>& trace() const { return trace_; }
  void set_log(LogFn log) { log_ = std::move(log); }
  /// Extra key=value pairs written into every checkpoint header.
  void set_header(KvConfig extra) { header_ = std::move(extra); }

 private:
  std::size_t sample_index(std::int64_t iter, std::size_t slot) const;

  TrainConfig cfg_;
  std::vector<Sample> dataset_;
  Model state_;
  AdamState<float> adam_;
  std::vector<LossRecord> trace_;
  LogFn log_;
  KvConfig header_;
};

struct TrainResult {
  Model state;
  std::vector<LossRecord> trace;
};

TrainResult train(const std::vector<Sample>& dataset, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  LogFn log = {});

}  // namespace esr::train
