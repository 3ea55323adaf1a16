#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "esr/autograd.hpp"

// Differentiable operations on Graph variables. Each op records itself on
// the graph of its first argument; all arguments must share that graph.
namespace esr::nd {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T s);
/// 1 - x
template <typename T> Var<T> one_minus(Var<T> x);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);

/// Row-wise softmax over the last dimension (max-subtracted).
template <typename T> Var<T> softmax_lastdim(Var<T> x);

/// Normalizes x[B,C,H,W] across C at every (b, y, x), then applies
/// per-channel gamma/beta. Variance is the biased estimate, epsilon 1e-5.
template <typename T> Var<T> layer_norm_channels(Var<T> x, Var<T> gamma, Var<T> beta);
inline constexpr double kLayerNormEps = 1e-5;

/// Stride-1 "same" cross-correlation with zero padding.
/// x[B,Cin,H,W], w[Cout,Cin,kh,kw] with odd kh/kw, bias[Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias = std::nullopt);

/// x[B,C,...] + b[C] broadcast over every non-channel position.
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> b);

/// a[B,m,k] x b[B,k,n] -> [B,m,n]
template <typename T> Var<T> matmul_batched(Var<T> a, Var<T> b);
/// Swaps the last two axes.
template <typename T> Var<T> transpose_last2(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
/// Concatenation along axis 1.
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& xs);

/// [B, r*r*C, H, W] -> [B, C, r*H, r*W] with
/// out[b][c][r*y+dy][r*x+dx] = in[b][c*r*r + dy*r + dx][y][x].
template <typename T> Var<T> pixel_shuffle(Var<T> x, std::size_t r);
/// Exact inverse of pixel_shuffle.
template <typename T> Var<T> pixel_unshuffle(Var<T> x, std::size_t r);

/// Sum of all elements, shape [1].
template <typename T> Var<T> sum(Var<T> x);
/// Mean of (a - b)^2 over all elements, shape [1].
template <typename T> Var<T> mse(Var<T> a, Var<T> b);
/// Sum of squares, shape [1].
template <typename T> Var<T> sum_squares(Var<T> x);

}  // namespace esr::nd
