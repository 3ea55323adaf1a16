#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include "esr/autograd.hpp"
#include "esr/ops.hpp"

namespace esr::bie {

using nd::Parameter;
using nd::Tensor;
using nd::Var;

/// Convolution weights [Cout, Cin, k, k] with an optional per-channel bias.
template <typename T>
struct Conv {
  Parameter<T> weight;
  std::optional<Parameter<T>> bias;

  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t kernel() const { return weight.value.dim(2); }
};

/// Weights uniform in +-sqrt(gain / fan_in), fan_in = cin * k * k unless
/// given; zero bias. gain 6 is the He-uniform bound.
template <typename T>
Conv<T> make_conv(std::size_t cin, std::size_t cout, std::size_t k, bool with_bias,
                  std::mt19937_64& rng, std::size_t fan_in = 0, double gain = 6.0);

template <typename T>
Var<T> apply(nd::Graph<T>& g, const Conv<T>& conv, Var<T> x);

/// One side's weights. "Side" is a polarity for inter-stream exchange and a
/// spatial/temporal branch for inner-stream exchange.
template <typename T>
struct BieSide {
  Conv<T> residual;   // 3x3, C -> C
  Conv<T> fuse;       // 3x3, 2C -> C over concat(h_int, h_side)
  Parameter<T> norm_gamma;
  Parameter<T> norm_beta;
  Conv<T> query;      // 1x1, C -> M
  Conv<T> value;      // 1x1, C -> M (keys are the transposed values)
  Conv<T> out;        // 1x1, M -> C, projects what this side receives
  Conv<T> gate_self;  // 1x1, C -> C, applied to the residual branch
  Conv<T> gate_cross; // 1x1, C -> C, applied to the received features
  Conv<T> cir_from;   // 3x3, M -> C, no bias: this side's half of the CIR update conv
};

/// Full exchange block: two sides plus the bias of the CIR update conv.
/// The CIR update is one 3x3 conv over concat(Q_a, Q_b) split into its two
/// input-channel halves, so swapping the sides is exact.
template <typename T>
struct BieParams {
  BieSide<T> a;
  BieSide<T> b;
  Parameter<T> cir_bias;  // [C]
};

template <typename T>
BieParams<T> make_bie_params(std::size_t channels, std::size_t structures, std::mt19937_64& rng,
                             double gain = 6.0);

/// Calls f(name, param) for every parameter in declaration order.
template <typename Params, typename F>
void visit_bie(Params& p, const std::string& prefix, F&& f);

enum class ScaleMode { eq2, pseudocode };

ScaleMode parse_scale_mode(std::string_view s);
std::string_view to_string(ScaleMode m);

/// Multiplier applied to Q * K^T before the softmax: 1/sqrt(H*W) for eq2,
/// sqrt(C) for pseudocode.
double attention_scale(ScaleMode mode, std::size_t channels, std::size_t height, std::size_t width);

template <typename T>
struct BieIO {
  Var<T> h_a;
  Var<T> h_b;
  Var<T> h_int;
};

/// Outputs plus the intermediates the tests inspect.
template <typename T>
struct BieResult {
  BieIO<T> out;
  Var<T> residual_a, residual_b;      // h'
  Var<T> exchanged_a, exchanged_b;    // projected features received by each side
  Var<T> gate_a, gate_b;              // Z
  Var<T> attention_a, attention_b;    // softmax rows, [B, M, M]; a's rows attend over b's values
  Var<T> values_a, values_b;          // V, [B, M, HW]
  Var<T> mixed_a, mixed_b;            // A * V before projection, [B, M, HW]
  Var<T> query_a, query_b;            // Q, [B, M, H, W]
};

template <typename T>
BieResult<T> bie_forward(const BieIO<T>& io, const BieParams<T>& params, ScaleMode mode);

/// Tensor-level wrapper of bie_forward.
template <typename T>
struct BieTensors {
  Tensor<T> h_a;
  Tensor<T> h_b;
  Tensor<T> h_int;
};

template <typename T>
BieTensors<T> bie_evaluate(const BieTensors<T>& in, const BieParams<T>& params, ScaleMode mode);

/// Evaluates the block on (h_a, h_b) and on (h_b, h_a) with the side bundles
/// swapped; true iff the swapped run returns the original side outputs
/// swapped and the identical CIR, bit for bit.
bool bie_swap_symmetry_check(const BieTensors<double>& in, const BieParams<double>& params,
                             ScaleMode mode = ScaleMode::eq2);

template <typename T>
BieParams<T> swap_sides(const BieParams<T>& p) {
  return BieParams<T>{p.b, p.a, p.cir_bias};
}

// ---------------------------------------------------------------------------

template <typename ConvT, typename F>
void visit_conv(ConvT& conv, const std::string& name, F&& f) {
  f(name + ".weight", conv.weight);
  if (conv.bias) f(name + ".bias", *conv.bias);
}

template <typename Side, typename F>
void visit_bie_side(Side& s, const std::string& prefix, F&& f) {
  visit_conv(s.residual, prefix + ".residual", f);
  visit_conv(s.fuse, prefix + ".fuse", f);
  f(prefix + ".norm.gamma", s.norm_gamma);
  f(prefix + ".norm.beta", s.norm_beta);
  visit_conv(s.query, prefix + ".query", f);
  visit_conv(s.value, prefix + ".value", f);
  visit_conv(s.out, prefix + ".out", f);
  visit_conv(s.gate_self, prefix + ".gate_self", f);
  visit_conv(s.gate_cross, prefix + ".gate_cross", f);
  visit_conv(s.cir_from, prefix + ".cir_from", f);
}

template <typename Params, typename F>
void visit_bie(Params& p, const std::string& prefix, F&& f) {
  visit_bie_side(p.a, prefix + ".a", f);
  visit_bie_side(p.b, prefix + ".b", f);
  f(prefix + ".cir_bias", p.cir_bias);
}

}  // namespace esr::bie
