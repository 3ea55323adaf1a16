#include "esr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "esr/checkpoint.hpp"
#include "esr/error.hpp"
#include "esr/ops.hpp"

namespace esr::train {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (!(lr0 > 0.0)) throw ArgumentError("lr0 must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw ArgumentError("decay must be in (0, 1]");
  if (decay_every < 1) throw ArgumentError("decay_every must be >= 1");
  if (max_iters < 0) throw ArgumentError("max_iters must be >= 0");
  if (threads < 1) throw ArgumentError("threads must be >= 1");
  if (checkpoint_every < 0) throw ArgumentError("checkpoint_every must be >= 0");
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set("batch_size", std::to_string(batch_size));
  std::ostringstream d;
  d.precision(17);
  d << lr0;
  kv.set("lr0", d.str());
  d.str("");
  d << decay;
  kv.set("decay", d.str());
  d.str("");
  d << clip_norm;
  kv.set("clip_norm", d.str());
  kv.set("decay_every", std::to_string(decay_every));
  kv.set("max_iters", std::to_string(max_iters));
  kv.set("augment", augment ? "true" : "false");
  kv.set("train_seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.batch_size = static_cast<std::size_t>(kv.get_int("batch_size", static_cast<std::int64_t>(c.batch_size)));
  c.lr0 = kv.get_double("lr0", c.lr0);
  c.decay = kv.get_double("decay", c.decay);
  c.decay_every = kv.get_int("decay_every", c.decay_every);
  c.max_iters = kv.get_int("max_iters", c.max_iters);
  c.augment = kv.get_bool("augment", c.augment);
  c.seed = static_cast<std::uint64_t>(kv.get_int("train_seed", static_cast<std::int64_t>(c.seed)));
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.validate();
  return c;
}

void validate_sample(const Sample& s, std::size_t scale) {
  if (s.lr_frames.empty() || s.lr_frames.size() != s.hr_frames.size())
    throw ShapeError("sample: need equal, non-zero numbers of LR and HR frames");
  const auto& first = s.lr_frames.front();
  for (std::size_t t = 0; t < s.lr_frames.size(); ++t) {
    const auto& lr = s.lr_frames[t];
    const auto& hr = s.hr_frames[t];
    if (lr.width != first.width || lr.height != first.height)
      throw ShapeError("sample: LR frames differ in size");
    if (hr.width != scale * lr.width || hr.height != scale * lr.height) {
      throw ShapeError("sample: HR frame " + std::to_string(hr.width) + "x" + std::to_string(hr.height) +
                       " is not " + std::to_string(scale) + "x the LR frame " + std::to_string(lr.width) +
                       "x" + std::to_string(lr.height));
    }
  }
}

std::vector<Sample> make_samples(const events::EventStream& lr, const events::EventStream& hr,
                                 events::Timestamp window_us, std::size_t T) {
  if (window_us < 1) throw ArgumentError("make_samples: window must be >= 1 us");
  if (T < 1) throw ArgumentError("make_samples: T must be >= 1");
  events::Timestamp last = 0;
  if (!lr.empty()) last = std::max(last, lr.events().back().t);
  if (!hr.empty()) last = std::max(last, hr.events().back().t);
  const std::size_t frames = std::max<std::size_t>(T, static_cast<std::size_t>(last / window_us) + 1);
  const auto lr_frames = events::frame_sequence(lr, window_us, frames, 0);
  const auto hr_frames = events::frame_sequence(hr, window_us, frames, 0);
  std::vector<Sample> out;
  for (std::size_t start = 0; start + T <= frames; ++start) {
    Sample s;
    s.lr_frames.assign(lr_frames.begin() + start, lr_frames.begin() + start + T);
    s.hr_frames.assign(hr_frames.begin() + start, hr_frames.begin() + start + T);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
nd::Var<T> loss_window(const std::vector<nd::Var<T>>& sr, const std::vector<nd::Var<T>>& hr) {
  if (sr.empty() || sr.size() != hr.size())
    throw ShapeError("loss_window: need equal, non-zero numbers of SR and HR frames");
  nd::Var<T> total = nd::mse(sr[0], hr[0]);
  for (std::size_t t = 1; t < sr.size(); ++t) total = nd::add(total, nd::mse(sr[t], hr[t]));
  return total;
}

double loss_window(const std::vector<PolarFrame>& sr, const std::vector<PolarFrame>& hr) {
  if (sr.empty() || sr.size() != hr.size())
    throw ShapeError("loss_window: need equal, non-zero numbers of SR and HR frames");
  double total = 0.0;
  for (std::size_t t = 0; t < sr.size(); ++t) {
    const auto& a = sr[t];
    const auto& b = hr[t];
    if (a.width != b.width || a.height != b.height) throw ShapeError("loss_window: frame size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pos.size(); ++i) {
      const double dp = a.pos[i] - b.pos[i];
      const double dn = a.neg[i] - b.neg[i];
      acc += dp * dp + dn * dn;
    }
    total += acc / static_cast<double>(2 * a.pos.size());
  }
  return total;
}

double lr_at(std::int64_t iter, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(iter / cfg.decay_every));
}

AugmentDraw draw_augment(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  AugmentDraw d;
  d.hflip = coin(rng);
  d.vflip = coin(rng);
  d.swap_polarity = coin(rng);
  return d;
}

namespace {

template <typename Map>
PolarFrame remap(const PolarFrame& f, Map src_index) {
  PolarFrame out(f.width, f.height, f.window);
  for (std::uint32_t y = 0; y < f.height; ++y) {
    for (std::uint32_t x = 0; x < f.width; ++x) {
      const std::size_t s = src_index(x, y);
      out.pos_at(x, y) = f.pos[s];
      out.neg_at(x, y) = f.neg[s];
    }
  }
  return out;
}

}  // namespace

PolarFrame flip_horizontal(const PolarFrame& f) {
  return remap(f, [&](std::uint32_t x, std::uint32_t y) { return f.index(f.width - 1 - x, y); });
}

PolarFrame flip_vertical(const PolarFrame& f) {
  return remap(f, [&](std::uint32_t x, std::uint32_t y) { return f.index(x, f.height - 1 - y); });
}

PolarFrame swap_polarity(const PolarFrame& f) {
  PolarFrame out = f;
  std::swap(out.pos, out.neg);
  return out;
}

Sample apply_augment(const Sample& s, const AugmentDraw& draw) {
  auto one = [&](PolarFrame f) {
    if (draw.hflip) f = flip_horizontal(f);
    if (draw.vflip) f = flip_vertical(f);
    if (draw.swap_polarity) f = swap_polarity(f);
    return f;
  };
  Sample out;
  for (const auto& f : s.lr_frames) out.lr_frames.push_back(one(f));
  for (const auto& f : s.hr_frames) out.hr_frames.push_back(one(f));
  return out;
}

Sample augment(const Sample& s, std::mt19937_64& rng) { return apply_augment(s, draw_augment(rng)); }

template <typename T>
void optimizer_step(std::span<nd::Parameter<T>* const> params, AdamState<T>& adam, double lr) {
  if (adam.m.size() != params.size()) {
    adam.m.clear();
    adam.v.clear();
    for (const auto* p : params) {
      adam.m.emplace_back(p->value.shape());
      adam.v.emplace_back(p->value.shape());
    }
  }
  ++adam.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (p.grad.shape() != p.value.shape()) p.grad = nd::Tensor<T>(p.value.shape());
    auto value = p.value.data();
    auto grad = p.grad.data();
    auto m = adam.m[k].data();
    auto v = adam.v[k].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      const double mi = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
      const double vi = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      value[i] = static_cast<T>(value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + kAdamEps));
    }
    p.zero_grad();
  }
}

template <typename T>
double clip_grad_norm(std::span<nd::Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->grad.data()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.data()) g *= factor;
  }
  return norm;
}

std::string loss_csv(const std::vector<LossRecord>& trace) {
  std::ostringstream out;
  out.precision(9);
  out << "iter,lr,loss\n";
  for (const auto& r : trace) out << r.iter << ',' << r.lr << ',' << r.loss << '\n';
  return out.str();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ purpose) ^ index);
}

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kAugmentStream = 2;

struct SampleGrad {
  nd::Graph<float> graph;
  double loss = 0.0;
};

void run_sample(const Model& state, const Sample& sample, SampleGrad& out) {
  auto& g = out.graph;
  std::vector<model::FrameInput<float>> inputs;
  std::vector<nd::Var<float>> targets;
  for (std::size_t t = 0; t < sample.lr_frames.size(); ++t) {
    inputs.push_back(model::to_input(g, sample.lr_frames[t]));
    const auto& hr = sample.hr_frames[t];
    std::vector<float> both(hr.pos.begin(), hr.pos.end());
    both.insert(both.end(), hr.neg.begin(), hr.neg.end());
    targets.push_back(g.constant(nd::Tensor<float>(nd::Shape{1, 2, hr.height, hr.width}, std::move(both))));
  }
  const auto sr = model::forward_sequence(g, state, inputs);
  const nd::Var<float> loss = loss_window(sr, targets);
  out.loss = loss.value()[0];
  g.backward(loss);
}

}  // namespace

Trainer::Trainer(const model::ModelConfig& model_cfg, const TrainConfig& cfg, std::vector<Sample> dataset)
    : cfg_(cfg), dataset_(std::move(dataset)), state_(model::init_model<float>(model_cfg)) {
  cfg_.validate();
  if (dataset_.empty()) throw ArgumentError("train: empty dataset");
  for (const auto& s : dataset_) validate_sample(s, model_cfg.scale);
}

Trainer::Trainer(const std::string& checkpoint, const TrainConfig& cfg, std::vector<Sample> dataset)
    : cfg_(cfg), dataset_(std::move(dataset)) {
  cfg_.validate();
  if (dataset_.empty()) throw ArgumentError("train: empty dataset");
  auto loaded = ckpt::load_model<float>(checkpoint);
  state_ = std::move(loaded.state);
  for (const auto& s : dataset_) validate_sample(s, state_.config.scale);
  adam_.step = loaded.header.get_int("adam_step", 0);
  if (adam_.step > 0) {
    model::visit_parameters(state_, [&](const std::string& name, const nd::Parameter<float>&) {
      auto m = loaded.extras.find("adam.m." + name);
      auto v = loaded.extras.find("adam.v." + name);
      if (m == loaded.extras.end() || v == loaded.extras.end())
        throw IoError("checkpoint '" + checkpoint + "': missing optimizer state for " + name);
      adam_.m.push_back(std::move(m->second));
      adam_.v.push_back(std::move(v->second));
    });
  }
}

std::size_t Trainer::sample_index(std::int64_t iter, std::size_t slot) const {
  // Position in an endless sequence of per-epoch permutations.
  const std::size_t n = dataset_.size();
  const std::uint64_t k = static_cast<std::uint64_t>(iter) * cfg_.batch_size + slot;
  const std::uint64_t epoch = k / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(cfg_.seed, kShuffleStream, epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[k % n];
}

LossRecord Trainer::step() {
  const std::int64_t iter = state_.iteration;  // 0-based index of this update
  const std::size_t B = cfg_.batch_size;

  std::vector<Sample> batch;
  batch.reserve(B);
  for (std::size_t j = 0; j < B; ++j) {
    const Sample& s = dataset_[sample_index(iter, j)];
    if (cfg_.augment) {
      std::mt19937_64 rng(derive_seed(cfg_.seed, kAugmentStream, static_cast<std::uint64_t>(iter) * B + j));
      batch.push_back(augment(s, rng));
    } else {
      batch.push_back(s);
    }
  }

  std::vector<SampleGrad> results(B);
  const std::size_t workers = std::min(cfg_.threads, B);
  if (workers <= 1) {
    for (std::size_t j = 0; j < B; ++j) run_sample(state_, batch[j], results[j]);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t j = w; j < B; j += workers) run_sample(state_, batch[j], results[j]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Gradient reduction in fixed sample order keeps results independent of the thread count.
  const auto params = model::parameter_list(state_);
  const float inv_b = 1.0f / static_cast<float>(B);
  double loss = 0.0;
  for (std::size_t j = 0; j < B; ++j) {
    loss += results[j].loss;
    for (auto* p : params) results[j].graph.accumulate_grads(*p, inv_b);
  }
  loss /= static_cast<double>(B);

  LossRecord rec;
  rec.iter = iter + 1;
  rec.lr = lr_at(iter, cfg_);
  rec.loss = loss;
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << rec.iter << " (lr " << rec.lr << ", loss " << loss << ")";
    throw NumericError(msg.str());
  }
  rec.grad_norm = clip_grad_norm<float>(params, cfg_.clip_norm);
  rec.clipped = cfg_.clip_norm > 0.0 && rec.grad_norm > cfg_.clip_norm;
  if (rec.clipped && log_) {
    std::ostringstream msg;
    msg << "iter " << rec.iter << ": clipped gradient norm " << rec.grad_norm << " to " << cfg_.clip_norm;
    log_(msg.str());
  }
  optimizer_step<float>(params, adam_, rec.lr);
  ++state_.iteration;
  trace_.push_back(rec);
  return rec;
}

void Trainer::run() {
  while (state_.iteration < cfg_.max_iters) {
    step();
    if (cfg_.checkpoint_every > 0 && !cfg_.checkpoint_path.empty() &&
        state_.iteration % cfg_.checkpoint_every == 0 && state_.iteration < cfg_.max_iters) {
      save(cfg_.checkpoint_path);
    }
  }
  if (!cfg_.checkpoint_path.empty()) save(cfg_.checkpoint_path);
}

void Trainer::save(const std::string& path) const {
  KvConfig extra = header_;
  const KvConfig train_kv = cfg_.to_kv();
  for (const auto& [k, v] : train_kv.values()) extra.set(k, v);
  extra.set("adam_step", std::to_string(adam_.step));
  ckpt::NamedTensors<float> moments;
  if (adam_.step > 0) {
    std::size_t k = 0;
    std::vector<std::string> names;
    model::visit_parameters(state_, [&](const std::string& name, const nd::Parameter<float>&) {
      names.push_back(name);
    });
    for (const auto& name : names) moments.emplace_back("adam.m." + name, &adam_.m[k++]);
    k = 0;
    for (const auto& name : names) moments.emplace_back("adam.v." + name, &adam_.v[k++]);
  }
  ckpt::save_model(path, state_, extra, moments);
}

TrainResult train(const std::vector<Sample>& dataset, const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  LogFn log) {
  Trainer trainer(model_cfg, cfg, dataset);
  trainer.set_log(std::move(log));
  trainer.run();
  return {trainer.state(), trainer.trace()};
}

#define ESR_INSTANTIATE_TRAIN(T)                                                                       \
  template nd::Var<T> loss_window<T>(const std::vector<nd::Var<T>>&, const std::vector<nd::Var<T>>&);  \
  template void optimizer_step<T>(std::span<nd::Parameter<T>* const>, AdamState<T>&, double);         \
  template double clip_grad_norm<T>(std::span<nd::Parameter<T>* const>, double);

ESR_INSTANTIATE_TRAIN(float)
ESR_INSTANTIATE_TRAIN(double)

}  // namespace esr::train
