#include "esr/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "esr/error.hpp"

namespace esr::model {

Variant parse_variant(std::string_view s) {
  if (s == "mixed") return Variant::mixed;
  if (s == "plain") return Variant::plain;
  if (s == "full") return Variant::full;
  throw ArgumentError("unknown variant '" + std::string(s) + "' (expected mixed, plain or full)");
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::mixed: return "mixed";
    case Variant::plain: return "plain";
    case Variant::full: return "full";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (channels < 1) throw ArgumentError("C must be >= 1");
  if (blocks < 1) throw ArgumentError("N must be >= 1");
  if (structures < 1) throw ArgumentError("M must be >= 1");
  if (window < 1) throw ArgumentError("T must be >= 1");
  if (scale < 1 || (scale & (scale - 1)) != 0)
    throw ArgumentError("S must be a power of two, got " + std::to_string(scale));
  if (!(init_gain > 0) || !std::isfinite(init_gain)) throw ArgumentError("init_gain must be a positive number");
}

KvConfig ModelConfig::to_kv() const {
  KvConfig kv;
  kv.set("C", std::to_string(channels));
  kv.set("N", std::to_string(blocks));
  kv.set("M", std::to_string(structures));
  kv.set("S", std::to_string(scale));
  kv.set("T", std::to_string(window));
  kv.set("variant", std::string(to_string(variant)));
  kv.set("carry_state", carry_state ? "true" : "false");
  kv.set("scale_mode", std::string(bie::to_string(scale_mode)));
  kv.set("seed", std::to_string(seed));
  std::ostringstream gain;
  gain.precision(17);
  gain << init_gain;
  kv.set("init_gain", gain.str());
  return kv;
}

ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
  auto count = [&](const char* key) {
    const std::int64_t v = kv.get_int(key);
    if (v < 1) throw ArgumentError(std::string(key) + " must be >= 1");
    return static_cast<std::size_t>(v);
  };
  ModelConfig c;
  c.channels = count("C");
  c.blocks = count("N");
  c.structures = count("M");
  c.scale = count("S");
  c.window = count("T");
  c.variant = parse_variant(kv.get_string("variant"));
  c.carry_state = kv.get_bool("carry_state");
  c.scale_mode = bie::parse_scale_mode(kv.get_string("scale_mode", "eq2"));
  c.seed = static_cast<std::uint64_t>(std::stoull(kv.get_string("seed", "0")));
  c.init_gain = kv.get_double("init_gain", 1.0);
  c.validate();
  return c;
}

std::size_t cir_count(Variant v) { return v == Variant::full ? 3 : 1; }

template <typename T>
ModelState<T> init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t C = config.channels, M = config.structures, S = config.scale;
  const double gain = config.init_gain;
  const bool decoupled = config.variant != Variant::mixed;
  const std::size_t streams = decoupled ? 2 : 1;

  auto block = [&] {
    ResidualBlock<T> b;
    b.conv1 = bie::make_conv<T>(C, C, 3, true, rng, 0, gain);
    b.conv2 = bie::make_conv<T>(C, C, 3, true, rng, 0, gain);
    return b;
  };

  ModelState<T> s;
  s.config = config;
  for (std::size_t i = 0; i < streams; ++i)
    s.embed_spatial.push_back(bie::make_conv<T>(decoupled ? 1 : 2, C, 3, true, rng, 0, gain));
  if (config.variant == Variant::full)
    for (std::size_t i = 0; i < 2; ++i) s.embed_temporal.push_back(bie::make_conv<T>(2, C, 3, true, rng, 0, gain));

  for (std::size_t l = 0; l < config.blocks; ++l) {
    ModelLayer<T> layer;
    for (std::size_t i = 0; i < streams; ++i) layer.spatial.push_back(block());
    if (config.variant == Variant::full) {
      for (std::size_t i = 0; i < 2; ++i) layer.temporal.push_back(block());
      for (std::size_t i = 0; i < 2; ++i) layer.inner.push_back(bie::make_bie_params<T>(C, M, rng, gain));
    }
    if (decoupled) layer.inter.push_back(bie::make_bie_params<T>(C, M, rng, gain));
    s.layers.push_back(std::move(layer));
  }

  if (config.carry_state)
    for (std::size_t i = 0; i < cir_count(config.variant); ++i)
      s.advance.push_back(bie::make_conv<T>(C, C, 1, true, rng, 0, gain));

  if (decoupled) {
    for (std::size_t i = 0; i < 2; ++i) s.heads.push_back(bie::make_conv<T>(C, S * S, 3, true, rng, 0, gain));
  } else {
    s.heads.push_back(bie::make_conv<T>(C, 2 * S * S, 3, true, rng, 0, gain));
  }
  return s;
}

template <typename T>
std::vector<nd::Parameter<T>*> parameter_list(ModelState<T>& state) {
  std::vector<nd::Parameter<T>*> out;
  visit_parameters(state, [&](const std::string&, nd::Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t count_params(const ModelState<T>& state) {
  std::size_t n = 0;
  visit_parameters(state, [&](const std::string&, const nd::Parameter<T>& p) { n += p.numel(); });
  return n;
}

std::uint64_t estimate_flops(const ModelConfig& config, std::size_t height, std::size_t width) {
  const std::uint64_t HW = std::uint64_t(height) * width;
  const std::uint64_t C = config.channels, M = config.structures, S = config.scale;
  auto conv = [&](std::uint64_t cin, std::uint64_t cout, std::uint64_t k) { return 2 * cin * cout * k * k * HW; };

  const std::uint64_t bie_side = conv(C, C, 3) + conv(2 * C, C, 3) + 2 * conv(C, M, 1) + conv(M, C, 1) +
                                 2 * conv(C, C, 1) + conv(M, C, 3);
  // Two attention products (Q K^T and A V) per side.
  const std::uint64_t bie = 2 * bie_side + 2 * 2 * (2 * M * M * HW);
  const std::uint64_t resblock = 2 * conv(C, C, 3);

  std::uint64_t total = 0;
  switch (config.variant) {
    case Variant::mixed:
      total += conv(2, C, 3) + config.blocks * resblock + conv(C, 2 * S * S, 3);
      break;
    case Variant::plain:
      total += 2 * conv(1, C, 3) + config.blocks * (2 * resblock + bie) + 2 * conv(C, S * S, 3);
      break;
    case Variant::full:
      total += 2 * conv(1, C, 3) + 2 * conv(2, C, 3) + config.blocks * (4 * resblock + 3 * bie) +
               2 * conv(C, S * S, 3);
      break;
  }
  if (config.carry_state) total += cir_count(config.variant) * conv(C, C, 1);
  return total;
}

template <typename T>
FrameInput<T> to_input(Graph<T>& g, const events::PolarFrame& frame) {
  const nd::Shape shape{1, 1, frame.height, frame.width};
  auto channel = [&](const std::vector<double>& v) {
    return g.constant(Tensor<T>(shape, std::vector<T>(v.begin(), v.end())));
  };
  return {channel(frame.pos), channel(frame.neg)};
}

template <typename T>
FrameInput<T> zero_input(Graph<T>& g, std::size_t height, std::size_t width) {
  const nd::Shape shape{1, 1, height, width};
  return {g.constant(Tensor<T>(shape)), g.constant(Tensor<T>(shape))};
}

template <typename T>
CirSet<T> zero_cir(Graph<T>& g, const ModelConfig& config, std::size_t height, std::size_t width) {
  const nd::Shape shape{1, config.channels, height, width};
  CirSet<T> cir;
  cir.inter = g.constant(Tensor<T>(shape));
  if (config.variant == Variant::full) {
    cir.inner_p = g.constant(Tensor<T>(shape));
    cir.inner_n = g.constant(Tensor<T>(shape));
  }
  return cir;
}

namespace {

template <typename T>
Var<T> residual(Graph<T>& g, const ResidualBlock<T>& b, Var<T> x) {
  return nd::add(x, bie::apply(g, b.conv2, nd::relu(bie::apply(g, b.conv1, x))));
}

template <typename T>
Var<T> head(Graph<T>& g, const Conv<T>& conv, Var<T> x, std::size_t scale) {
  return nd::relu(nd::pixel_shuffle(bie::apply(g, conv, x), scale));
}

}  // namespace

template <typename T>
StepOutput<T> forward_step(Graph<T>& g, const ModelState<T>& state, const FrameInput<T>& frame,
                           const FrameInput<T>& prev, const CirSet<T>& cir) {
  const ModelConfig& cfg = state.config;
  const nd::Shape in = frame.pos.shape();
  if (in.size() != 4 || in[0] != 1 || in[1] != 1 || frame.neg.shape() != in || prev.pos.shape() != in ||
      prev.neg.shape() != in) {
    throw ShapeError("forward_step: frames must be [1,1,H,W] of one size, got " + nd::to_string(in));
  }
  const nd::Shape hidden{1, cfg.channels, in[2], in[3]};
  auto check_cir = [&](const Var<T>& v, const char* name) {
    if (!v.valid() || v.shape() != hidden)
      throw ShapeError(std::string("forward_step: CIR '") + name + "' must be " + nd::to_string(hidden));
  };
  check_cir(cir.inter, "inter");

  StepOutput<T> out;
  if (cfg.variant == Variant::mixed) {
    Var<T> h = bie::apply(g, state.embed_spatial[0], nd::concat_channels<T>({frame.pos, frame.neg}));
    if (cfg.carry_state) h = nd::add(h, cir.inter);
    for (const auto& layer : state.layers) h = residual(g, layer.spatial[0], h);
    out.sr = head(g, state.heads[0], h, cfg.scale);
    out.cir.inter = h;
    return out;
  }

  const bool full = cfg.variant == Variant::full;
  if (full) {
    check_cir(cir.inner_p, "inner_p");
    check_cir(cir.inner_n, "inner_n");
  }
  const Var<T> x[2] = {frame.pos, frame.neg};
  const Var<T> x_prev[2] = {prev.pos, prev.neg};
  Var<T> sp[2], tp[2];
  Var<T> inner[2] = {cir.inner_p, cir.inner_n};
  Var<T> inter = cir.inter;
  for (int s = 0; s < 2; ++s) {
    sp[s] = bie::apply(g, state.embed_spatial[s], x[s]);
    if (full) tp[s] = bie::apply(g, state.embed_temporal[s], nd::concat_channels<T>({x[s], x_prev[s]}));
  }

  for (const auto& layer : state.layers) {
    for (int s = 0; s < 2; ++s) {
      sp[s] = residual(g, layer.spatial[s], sp[s]);
      if (!full) continue;
      tp[s] = residual(g, layer.temporal[s], tp[s]);
      const auto r = bie::bie_forward<T>({sp[s], tp[s], inner[s]}, layer.inner[s], cfg.scale_mode);
      sp[s] = r.out.h_a;
      tp[s] = r.out.h_b;
      inner[s] = r.out.h_int;
    }
    const auto r = bie::bie_forward<T>({sp[0], sp[1], inter}, layer.inter[0], cfg.scale_mode);
    sp[0] = r.out.h_a;
    sp[1] = r.out.h_b;
    inter = r.out.h_int;
  }

  out.sr = nd::concat_channels<T>({head(g, state.heads[0], sp[0], cfg.scale),
                                   head(g, state.heads[1], sp[1], cfg.scale)});
  out.cir.inter = inter;
  if (full) {
    out.cir.inner_p = inner[0];
    out.cir.inner_n = inner[1];
  }
  return out;
}

template <typename T>
CirSet<T> advance_cir(Graph<T>& g, const ModelState<T>& state, const CirSet<T>& cir) {
  const nd::Shape shape = cir.inter.shape();
  if (!state.config.carry_state) return zero_cir(g, state.config, shape[2], shape[3]);
  CirSet<T> next;
  next.inter = nd::relu(bie::apply(g, state.advance[0], cir.inter));
  if (state.config.variant == Variant::full) {
    next.inner_p = nd::relu(bie::apply(g, state.advance[1], cir.inner_p));
    next.inner_n = nd::relu(bie::apply(g, state.advance[2], cir.inner_n));
  }
  return next;
}

template <typename T>
std::vector<Var<T>> forward_sequence(Graph<T>& g, const ModelState<T>& state,
                                     const std::vector<FrameInput<T>>& frames) {
  if (frames.empty()) throw ArgumentError("forward_sequence: empty frame list");
  std::vector<Var<T>> out;
  const nd::Shape in = frames.front().pos.shape();
  if (in.size() != 4) throw ShapeError("forward_sequence: frames must be [1,1,H,W]");
  FrameInput<T> prev = zero_input(g, in[2], in[3]);
  CirSet<T> cir = zero_cir(g, state.config, in[2], in[3]);
  out.reserve(frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    if (t > 0) cir = advance_cir(g, state, cir);
    StepOutput<T> step = forward_step(g, state, frames[t], prev, cir);
    out.push_back(step.sr);
    cir = step.cir;
    prev = frames[t];
  }
  return out;
}

template <typename T>
events::PolarFrame to_frame(const Tensor<T>& sr, events::Window window) {
  if (sr.rank() != 4 || sr.dim(0) != 1 || sr.dim(1) != 2)
    throw ShapeError("to_frame: expected [1,2,H,W], got " + nd::to_string(sr.shape()));
  const auto h = static_cast<std::uint32_t>(sr.dim(2));
  const auto w = static_cast<std::uint32_t>(sr.dim(3));
  events::PolarFrame f(w, h, window);
  const std::size_t plane = std::size_t(w) * h;
  for (std::size_t i = 0; i < plane; ++i) {
    f.pos[i] = static_cast<double>(sr[i]);
    f.neg[i] = static_cast<double>(sr[plane + i]);
  }
  return f;
}

template <typename T>
std::vector<events::PolarFrame> super_resolve(const ModelState<T>& state,
                                              const std::vector<events::PolarFrame>& frames) {
  Graph<T> g;
  std::vector<FrameInput<T>> inputs;
  inputs.reserve(frames.size());
  for (const auto& f : frames) {
    if (f.width != frames.front().width || f.height != frames.front().height)
      throw ShapeError("super_resolve: frames differ in size");
    inputs.push_back(to_input(g, f));
  }
  const auto outputs = forward_sequence(g, state, inputs);
  std::vector<events::PolarFrame> result;
  result.reserve(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) result.push_back(to_frame(outputs[i].value(), frames[i].window));
  return result;
}

template <typename To, typename From>
ModelState<To> convert_model(const ModelState<From>& state) {
  ModelState<To> out = init_model<To>(state.config);
  out.iteration = state.iteration;
  std::vector<const nd::Parameter<From>*> src;
  visit_parameters(state, [&](const std::string&, const nd::Parameter<From>& p) { src.push_back(&p); });
  std::size_t i = 0;
  visit_parameters(out, [&](const std::string&, nd::Parameter<To>& p) {
    p = nd::Parameter<To>(src.at(i++)->value.template cast<To>());
  });
  return out;
}

#define ESR_INSTANTIATE_MODEL(T)                                                                       \
  template ModelState<T> init_model<T>(const ModelConfig&);                                          \
  template std::vector<nd::Parameter<T>*> parameter_list<T>(ModelState<T>&);                         \
  template std::size_t count_params<T>(const ModelState<T>&);                                        \
  template FrameInput<T> to_input<T>(Graph<T>&, const events::PolarFrame&);                          \
  template FrameInput<T> zero_input<T>(Graph<T>&, std::size_t, std::size_t);                         \
  template CirSet<T> zero_cir<T>(Graph<T>&, const ModelConfig&, std::size_t, std::size_t);           \
  template StepOutput<T> forward_step<T>(Graph<T>&, const ModelState<T>&, const FrameInput<T>&,      \
                                         const FrameInput<T>&, const CirSet<T>&);                    \
  template CirSet<T> advance_cir<T>(Graph<T>&, const ModelState<T>&, const CirSet<T>&);              \
  template std::vector<Var<T>> forward_sequence<T>(Graph<T>&, const ModelState<T>&,                  \
                                                   const std::vector<FrameInput<T>>&);               \
  template events::PolarFrame to_frame<T>(const Tensor<T>&, events::Window);                         \
  template std::vector<events::PolarFrame> super_resolve<T>(const ModelState<T>&,                    \
                                                            const std::vector<events::PolarFrame>&);

ESR_INSTANTIATE_MODEL(float)
ESR_INSTANTIATE_MODEL(double)

template ModelState<float> convert_model<float, double>(const ModelState<double>&);
template ModelState<double> convert_model<double, float>(const ModelState<float>&);
template ModelState<float> convert_model<float, float>(const ModelState<float>&);
template ModelState<double> convert_model<double, double>(const ModelState<double>&);

}  // namespace esr::model
