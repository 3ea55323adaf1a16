#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "esr/bie.hpp"
#include "esr/events.hpp"
#include "esr/kv_config.hpp"

namespace esr::model {

using bie::Conv;
using nd::Graph;
using nd::Tensor;
using nd::Var;

/// Network layouts. `plain` and `full` are the decoupled two-stream models
/// (full adds temporal sub-streams with inner-stream exchange); `mixed` is
/// the single-stream baseline fed with concatenated polarities and no
/// exchange, kept for ablation comparisons.
enum class Variant { mixed, plain, full };

Variant parse_variant(std::string_view s);
std::string_view to_string(Variant v);

struct ModelConfig {
  std::size_t channels = 128;   // C
  std::size_t blocks = 5;       // N, layers per stream
  std::size_t structures = 128; // M, attention rows per exchange
  std::size_t scale = 4;        // S
  std::size_t window = 9;       // T, frames per training segment
  Variant variant = Variant::full;
  bool carry_state = true;      // recurrent CIR hand-off between steps
  bie::ScaleMode scale_mode = bie::ScaleMode::eq2;
  std::uint64_t seed = 0;
  double init_gain = 1.0;       // conv weights ~ U(+-sqrt(init_gain / fan_in)); 6 is He-uniform

  void validate() const;
  KvConfig to_kv() const;
  static ModelConfig from_kv(const KvConfig& kv);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ResidualBlock {
  Conv<T> conv1;
  Conv<T> conv2;
};

/// One layer. Per-polarity vectors are ordered (positive, negative); the
/// mixed variant has a single spatial block and nothing else.
template <typename T>
struct ModelLayer {
  std::vector<ResidualBlock<T>> spatial;
  std::vector<ResidualBlock<T>> temporal;     // full only
  std::vector<bie::BieParams<T>> inner;       // full only; side a = spatial, b = temporal
  std::vector<bie::BieParams<T>> inter;       // plain/full: one block; side a = positive
};

template <typename T>
struct ModelState {
  ModelConfig config;
  std::vector<Conv<T>> embed_spatial;   // 1 -> C per polarity (mixed: one 2 -> C)
  std::vector<Conv<T>> embed_temporal;  // full only: 2 -> C per polarity
  std::vector<ModelLayer<T>> layers;
  std::vector<Conv<T>> advance;         // 1x1 C -> C per carried CIR: inter, inner_p, inner_n
  std::vector<Conv<T>> heads;           // 3x3 C -> S^2 per polarity (mixed: one C -> 2 S^2)
  std::int64_t iteration = 0;
};

template <typename T>
ModelState<T> init_model(const ModelConfig& config);

/// Number of CIR tensors the variant carries (inter first, then inner_p, inner_n).
std::size_t cir_count(Variant v);

/// f(name, Parameter&) for every parameter, in declaration order.
template <typename State, typename F>
void visit_parameters(State& state, F&& f);

template <typename T>
std::vector<nd::Parameter<T>*> parameter_list(ModelState<T>& state);

template <typename T>
std::size_t count_params(const ModelState<T>& state);

/// Forward-step FLOPs at LR resolution H x W: 2 per multiply-add for every
/// conv tap and 2 * M^2 * HW per attention product.
std::uint64_t estimate_flops(const ModelConfig& config, std::size_t height, std::size_t width);

/// Per-polarity count maps, each [1, 1, H, W].
template <typename T>
struct FrameInput {
  Var<T> pos;
  Var<T> neg;
};

template <typename T>
FrameInput<T> to_input(Graph<T>& g, const events::PolarFrame& frame);
template <typename T>
FrameInput<T> zero_input(Graph<T>& g, std::size_t height, std::size_t width);

/// Cross-level interaction representations. Entries the variant does not use
/// stay invalid.
template <typename T>
struct CirSet {
  Var<T> inter;
  Var<T> inner_p;
  Var<T> inner_n;
};

template <typename T>
CirSet<T> zero_cir(Graph<T>& g, const ModelConfig& config, std::size_t height, std::size_t width);

template <typename T>
struct StepOutput {
  Var<T> sr;  // [1, 2, S*H, S*W], channels (pos, neg)
  CirSet<T> cir;
};

template <typename T>
StepOutput<T> forward_step(Graph<T>& g, const ModelState<T>& state, const FrameInput<T>& frame,
                           const FrameInput<T>& prev, const CirSet<T>& cir);

/// ReLU(conv1x1(cir)) per carried CIR; zeros when carry_state is off.
template <typename T>
CirSet<T> advance_cir(Graph<T>& g, const ModelState<T>& state, const CirSet<T>& cir);

template <typename T>
std::vector<Var<T>> forward_sequence(Graph<T>& g, const ModelState<T>& state,
                                     const std::vector<FrameInput<T>>& frames);

/// Converts an SR output [1, 2, H, W] into a count frame for `window`.
template <typename T>
events::PolarFrame to_frame(const Tensor<T>& sr, events::Window window);

/// Runs forward_sequence on count frames and returns the SR frames, each
/// with the window of its input frame.
template <typename T>
std::vector<events::PolarFrame> super_resolve(const ModelState<T>& state,
                                              const std::vector<events::PolarFrame>& frames);

/// Copies parameter values between precisions (same config required).
template <typename To, typename From>
ModelState<To> convert_model(const ModelState<From>& state);

// ---------------------------------------------------------------------------

template <typename Block, typename F>
void visit_residual(Block& b, const std::string& prefix, F&& f) {
  bie::visit_conv(b.conv1, prefix + ".conv1", f);
  bie::visit_conv(b.conv2, prefix + ".conv2", f);
}

template <typename State, typename F>
void visit_parameters(State& s, F&& f) {
  for (std::size_t i = 0; i < s.embed_spatial.size(); ++i)
    bie::visit_conv(s.embed_spatial[i], "embed_spatial." + std::to_string(i), f);
  for (std::size_t i = 0; i < s.embed_temporal.size(); ++i)
    bie::visit_conv(s.embed_temporal[i], "embed_temporal." + std::to_string(i), f);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    auto& layer = s.layers[l];
    const std::string p = "layer" + std::to_string(l);
    for (std::size_t i = 0; i < layer.spatial.size(); ++i)
      visit_residual(layer.spatial[i], p + ".spatial." + std::to_string(i), f);
    for (std::size_t i = 0; i < layer.temporal.size(); ++i)
      visit_residual(layer.temporal[i], p + ".temporal." + std::to_string(i), f);
    for (std::size_t i = 0; i < layer.inner.size(); ++i)
      bie::visit_bie(layer.inner[i], p + ".inner." + std::to_string(i), f);
    for (std::size_t i = 0; i < layer.inter.size(); ++i)
      bie::visit_bie(layer.inter[i], p + ".inter", f);
  }
  for (std::size_t i = 0; i < s.advance.size(); ++i)
    bie::visit_conv(s.advance[i], "advance." + std::to_string(i), f);
  for (std::size_t i = 0; i < s.heads.size(); ++i)
    bie::visit_conv(s.heads[i], "head." + std::to_string(i), f);
}

}  // namespace esr::model
