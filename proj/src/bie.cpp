#include "esr/bie.hpp"

#include <cmath>

#include "esr/error.hpp"

namespace esr::bie {

namespace {

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

template <typename T>
Conv<T> make_conv(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias,
                  std::mt19937_64& rng, std::size_t fan_in, double gain) {
  Conv<T> conv;
  Tensor<T> w(nd::Shape{cout, cin, k, k});
  if (fan_in == 0) fan_in = cin * k * k;
  if (!(gain > 0)) throw ArgumentError("make_conv: gain must be > 0");
  const double bound = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : w.data()) v = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * bound);
  conv.weight = Parameter<T>(std::move(w));
  if (with_bias) conv.bias = Parameter<T>(Tensor<T>(nd::Shape{cout}));
  return conv;
}

template <typename T>
Var<T> apply(nd::Graph<T>& g, const Conv<T>& conv, Var<T> x) {
  std::optional<Var<T>> bias;
  if (conv.bias) bias = g.param(*conv.bias);
  return nd::conv2d(x, g.param(conv.weight), bias);
}

namespace {

template <typename T>
BieSide<T> make_side(std::size_t c, std::size_t m, std::mt19937_64& rng, double gain) {
  BieSide<T> s;
  s.residual = make_conv<T>(c, c, 3, true, rng, 0, gain);
  s.fuse = make_conv<T>(2 * c, c, 3, true, rng, 0, gain);
  s.norm_gamma = Parameter<T>(Tensor<T>(nd::Shape{c}, T{1}));
  s.norm_beta = Parameter<T>(Tensor<T>(nd::Shape{c}));
  s.query = make_conv<T>(c, m, 1, true, rng, 0, gain);
  s.value = make_conv<T>(c, m, 1, true, rng, 0, gain);
  s.out = make_conv<T>(m, c, 1, true, rng, 0, gain);
  s.gate_self = make_conv<T>(c, c, 1, true, rng, 0, gain);
  s.gate_cross = make_conv<T>(c, c, 1, true, rng, 0, gain);
  // Half of the 3x3 CIR update conv; its fan-in is that of the whole 2M -> C conv.
  s.cir_from = make_conv<T>(m, c, 3, false, rng, 2 * m * 9, gain);
  return s;
}

}  // namespace

template <typename T>
BieParams<T> make_bie_params(std::size_t channels, std::size_t structures, std::mt19937_64& rng,
                             double gain) {
  if (channels < 1 || structures < 1) throw ArgumentError("bie: C and M must be >= 1");
  BieParams<T> p;
  p.a = make_side<T>(channels, structures, rng, gain);
  p.b = make_side<T>(channels, structures, rng, gain);
  p.cir_bias = Parameter<T>(Tensor<T>(nd::Shape{channels}));
  return p;
}

ScaleMode parse_scale_mode(std::string_view s) {
  if (s == "eq2") return ScaleMode::eq2;
  if (s == "pseudocode") return ScaleMode::pseudocode;
  throw ArgumentError("unknown scale mode '" + std::string(s) + "'");
}

std::string_view to_string(ScaleMode m) { return m == ScaleMode::eq2 ? "eq2" : "pseudocode"; }

double attention_scale(ScaleMode mode, std::size_t channels, std::size_t height, std::size_t width) {
  switch (mode) {
    case ScaleMode::eq2:
      return 1.0 / std::sqrt(static_cast<double>(height * width));
    case ScaleMode::pseudocode:
      return std::sqrt(static_cast<double>(channels));
  }
  throw ArgumentError("unknown scale mode");
}

template <typename T>
BieResult<T> bie_forward(const BieIO<T>& io, const BieParams<T>& params, ScaleMode mode) {
  const nd::Shape& s = io.h_a.shape();
  if (s.size() != 4 || io.h_b.shape() != s || io.h_int.shape() != s) {
    throw ShapeError("bie_forward: h_a, h_b and h_int must share one [B,C,H,W] shape, got " +
                     nd::to_string(s) + ", " + nd::to_string(io.h_b.shape()) + ", " +
                     nd::to_string(io.h_int.shape()));
  }
  const std::size_t B = s[0], C = s[1], H = s[2], W = s[3], HW = H * W;
  const std::size_t M = params.a.query.out_channels();
  if (params.a.residual.in_channels() != C || params.b.residual.in_channels() != C ||
      params.b.query.out_channels() != M) {
    throw ShapeError("bie_forward: parameters do not match C=" + std::to_string(C));
  }
  auto& g = io.h_a.graph();
  const T attn_scale = static_cast<T>(attention_scale(mode, C, H, W));

  auto query = [&](const BieSide<T>& side, Var<T> h) {
    Var<T> fused = apply(g, side.fuse, nd::concat_channels<T>({io.h_int, h}));
    Var<T> normed = nd::layer_norm_channels(fused, g.param(side.norm_gamma), g.param(side.norm_beta));
    return apply(g, side.query, normed);
  };

  BieResult<T> r;
  r.query_a = query(params.a, io.h_a);
  r.query_b = query(params.b, io.h_b);
  r.values_a = nd::reshape(apply(g, params.a.value, io.h_a), {B, M, HW});
  r.values_b = nd::reshape(apply(g, params.b.value, io.h_b), {B, M, HW});

  // Keys are the transposed values of the other side.
  auto attend = [&](Var<T> q, Var<T> v_other) {
    Var<T> scores = nd::matmul_batched(nd::reshape(q, {B, M, HW}), nd::transpose_last2(v_other));
    return nd::softmax_lastdim(nd::scale(scores, attn_scale));
  };
  r.attention_a = attend(r.query_a, r.values_b);
  r.attention_b = attend(r.query_b, r.values_a);
  r.mixed_a = nd::matmul_batched(r.attention_a, r.values_b);
  r.mixed_b = nd::matmul_batched(r.attention_b, r.values_a);
  r.exchanged_a = apply(g, params.a.out, nd::reshape(r.mixed_a, {B, M, H, W}));
  r.exchanged_b = apply(g, params.b.out, nd::reshape(r.mixed_b, {B, M, H, W}));

  r.residual_a = apply(g, params.a.residual, io.h_a);
  r.residual_b = apply(g, params.b.residual, io.h_b);

  auto gated = [&](const BieSide<T>& side, Var<T> residual, Var<T> exchanged, Var<T>& gate) {
    gate = nd::sigmoid(nd::add(apply(g, side.gate_self, residual), apply(g, side.gate_cross, exchanged)));
    return nd::add(nd::mul(gate, residual), nd::mul(nd::one_minus(gate), exchanged));
  };
  r.out.h_a = gated(params.a, r.residual_a, r.exchanged_a, r.gate_a);
  r.out.h_b = gated(params.b, r.residual_b, r.exchanged_b, r.gate_b);

  Var<T> cir = nd::add(apply(g, params.a.cir_from, r.query_a), apply(g, params.b.cir_from, r.query_b));
  r.out.h_int = nd::add(nd::add_channel_bias(cir, g.param(params.cir_bias)), io.h_int);
  return r;
}

template <typename T>
BieTensors<T> bie_evaluate(const BieTensors<T>& in, const BieParams<T>& params, ScaleMode mode) {
  nd::Graph<T> g;
  BieIO<T> io{g.constant(in.h_a), g.constant(in.h_b), g.constant(in.h_int)};
  const BieResult<T> r = bie_forward(io, params, mode);
  return {r.out.h_a.value(), r.out.h_b.value(), r.out.h_int.value()};
}

bool bie_swap_symmetry_check(const BieTensors<double>& in, const BieParams<double>& params,
                             ScaleMode mode) {
  const BieTensors<double> direct = bie_evaluate(in, params, mode);
  const BieTensors<double> swapped =
      bie_evaluate(BieTensors<double>{in.h_b, in.h_a, in.h_int}, swap_sides(params), mode);
  return swapped.h_a == direct.h_b && swapped.h_b == direct.h_a && swapped.h_int == direct.h_int;
}

#define ESR_INSTANTIATE_BIE(T)                                                                   \
  template Conv<T> make_conv<T>(std::size_t, std::size_t, std::size_t, bool, std::mt19937_64&,   \
                                std::size_t, double);                                          \
  template Var<T> apply<T>(nd::Graph<T>&, const Conv<T>&, Var<T>);                             \
  template BieParams<T> make_bie_params<T>(std::size_t, std::size_t, std::mt19937_64&, double); \
  template BieResult<T> bie_forward<T>(const BieIO<T>&, const BieParams<T>&, ScaleMode);        \
  template BieTensors<T> bie_evaluate<T>(const BieTensors<T>&, const BieParams<T>&, ScaleMode);

ESR_INSTANTIATE_BIE(float)
ESR_INSTANTIATE_BIE(double)

}  // namespace esr::bie
