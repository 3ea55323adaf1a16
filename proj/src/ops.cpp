#include "esr/ops.hpp"

#include <algorithm>
#include <cmath>

#include "esr/error.hpp"

namespace esr::nd {

namespace {

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b, const char* op) {
  if (!a.valid() || !b.valid() || &a.graph() != &b.graph()) {
    throw ArgumentError(std::string(op) + ": operands must live on the same graph");
  }
  return a.graph();
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
void require_rank(Var<T> x, std::size_t rank, const char* op) {
  if (x.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    for (std::size_t in : {ia, ib}) {
      if (!g.requires_grad(in)) continue;
      auto gi = g.grad(in).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    if (g.requires_grad(ia)) {
      auto gi = g.grad(ia).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      auto gi = g.grad(ib).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    const auto av = g.value(ia).data();
    const auto bv = g.value(ib).data();
    if (g.requires_grad(ia)) {
      auto gi = g.grad(ia).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      auto gi = g.grad(ib).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  auto& g = x.graph();
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix, s](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += s * go[i];
  });
}

template <typename T>
Var<T> one_minus(Var<T> x) {
  auto& g = x.graph();
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T{1} - v;
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go[i];
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  auto& g = x.graph();
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    const auto xv = g.value(ix).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) {
      if (xv[i] > T{0}) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  auto& g = x.graph();
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T{1} / (T{1} + std::exp(-v));
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    const auto y = g.value(self).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  auto& g = x.graph();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().numel() / n;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * n;
    const T mx = *std::max_element(row, row + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix, n, rows](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    const T* y = g.value(self).raw();
    T* gi = g.grad(ix).raw();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += go[o + j] * y[o + j];
      for (std::size_t j = 0; j < n; ++j) gi[o + j] += y[o + j] * (go[o + j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_channels(Var<T> x, Var<T> gamma, Var<T> beta) {
  auto& g = same_graph(x, gamma, "layer_norm_channels");
  same_graph(x, beta, "layer_norm_channels");
  require_rank(x, 4, "layer_norm_channels");
  const auto& s = x.shape();
  const std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("layer_norm_channels: gamma/beta must have shape (" + std::to_string(C) + ")");
  }
  const T eps = static_cast<T>(kLayerNormEps);

  // Normalized values and inverse std are kept for the backward pass.
  Tensor<T> xhat(s);
  Tensor<T> inv_std(Shape{B, HW});
  Tensor<T> out(s);
  const T* xv = x.value().raw();
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      T mean{0};
      for (std::size_t c = 0; c < C; ++c) mean += xv[(b * C + c) * HW + p];
      mean /= static_cast<T>(C);
      T var{0};
      for (std::size_t c = 0; c < C; ++c) {
        const T d = xv[(b * C + c) * HW + p] - mean;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[b * HW + p] = is;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t k = (b * C + c) * HW + p;
        xhat[k] = (xv[k] - mean) * is;
        out[k] = gv[c] * xhat[k] + bv[c];
      }
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return g.record(std::move(out), {ix, ig, ib},
                  [ix, ig, ib, B, C, HW, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<T>& g, std::size_t self) {
                    const T* go = g.grad_view(self).raw();
                    const T* gv = g.value(ig).raw();
                    if (g.requires_grad(ig) || g.requires_grad(ib)) {
                      T* dg = g.requires_grad(ig) ? g.grad(ig).raw() : nullptr;
                      T* db = g.requires_grad(ib) ? g.grad(ib).raw() : nullptr;
                      for (std::size_t b = 0; b < B; ++b) {
                        for (std::size_t c = 0; c < C; ++c) {
                          for (std::size_t p = 0; p < HW; ++p) {
                            const std::size_t k = (b * C + c) * HW + p;
                            if (dg) dg[c] += go[k] * xhat[k];
                            if (db) db[c] += go[k];
                          }
                        }
                      }
                    }
                    if (!g.requires_grad(ix)) return;
                    T* dx = g.grad(ix).raw();
                    const T inv_c = T{1} / static_cast<T>(C);
                    for (std::size_t b = 0; b < B; ++b) {
                      for (std::size_t p = 0; p < HW; ++p) {
                        T mean_d{0};
                        T mean_dx{0};
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t k = (b * C + c) * HW + p;
                          const T d = go[k] * gv[c];
                          mean_d += d;
                          mean_dx += d * xhat[k];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        const T is = inv_std[b * HW + p];
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t k = (b * C + c) * HW + p;
                          dx[k] += is * (go[k] * gv[c] - mean_d - xhat[k] * mean_dx);
                        }
                      }
                    }
                  });
}

namespace {

struct ConvGeom {
  std::size_t B, Cin, Cout, H, W, kh, kw;
};

// Visits every (input row, output row, column range) pair touched by the
// kernel tap (ky, kx) of a same-padded stride-1 convolution.
template <typename F>
void for_tap_rows(const ConvGeom& g, std::size_t ky, std::size_t kx, F&& f) {
  const auto dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(g.kh / 2);
  const auto dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(g.H);
  const auto W = static_cast<std::ptrdiff_t>(g.W);
  const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
  const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(H, H - dy);
  const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
  const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
  if (x0 >= x1) return;
  for (std::ptrdiff_t y = y0; y < y1; ++y) {
    f(static_cast<std::size_t>(y + dy) * g.W + static_cast<std::size_t>(x0 + dx),
      static_cast<std::size_t>(y) * g.W + static_cast<std::size_t>(x0),
      static_cast<std::size_t>(x1 - x0));
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> bias) {
  auto& g = same_graph(x, w, "conv2d");
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ws[1]) + " input channels, got " +
                     std::to_string(xs[1]));
  }
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  const ConvGeom geo{xs[0], xs[1], ws[0], xs[2], xs[3], ws[2], ws[3]};
  std::vector<std::size_t> inputs{x.id(), w.id()};
  if (bias) {
    same_graph(x, *bias, "conv2d");
    if (bias->shape() != Shape{geo.Cout}) throw ShapeError("conv2d: bias must have shape (Cout)");
    inputs.push_back(bias->id());
  }

  const std::size_t plane = geo.H * geo.W;
  Tensor<T> out(Shape{geo.B, geo.Cout, geo.H, geo.W});
  const T* xv = x.value().raw();
  const T* wv = w.value().raw();
  T* ov = out.raw();
  for (std::size_t b = 0; b < geo.B; ++b) {
    for (std::size_t co = 0; co < geo.Cout; ++co) {
      T* o = ov + (b * geo.Cout + co) * plane;
      for (std::size_t ci = 0; ci < geo.Cin; ++ci) {
        const T* in = xv + (b * geo.Cin + ci) * plane;
        const T* k = wv + (co * geo.Cin + ci) * geo.kh * geo.kw;
        for (std::size_t ky = 0; ky < geo.kh; ++ky) {
          for (std::size_t kx = 0; kx < geo.kw; ++kx) {
            const T kv = k[ky * geo.kw + kx];
            for_tap_rows(geo, ky, kx, [&](std::size_t src, std::size_t dst, std::size_t len) {
              const T* s = in + src;
              T* d = o + dst;
              for (std::size_t i = 0; i < len; ++i) d[i] += kv * s[i];
            });
          }
        }
      }
      if (bias) {
        const T bv = bias->value()[co];
        for (std::size_t i = 0; i < plane; ++i) o[i] += bv;
      }
    }
  }

  const std::size_t ix = x.id(), iw = w.id();
  const std::size_t ibias = bias ? bias->id() : SIZE_MAX;
  return g.record(std::move(out), inputs, [ix, iw, ibias, geo](Graph<T>& g, std::size_t self) {
    const std::size_t plane = geo.H * geo.W;
    const T* go = g.grad_view(self).raw();
    const T* xv = g.value(ix).raw();
    const T* wv = g.value(iw).raw();
    T* dx = g.requires_grad(ix) ? g.grad(ix).raw() : nullptr;
    T* dw = g.requires_grad(iw) ? g.grad(iw).raw() : nullptr;
    T* db = (ibias != SIZE_MAX && g.requires_grad(ibias)) ? g.grad(ibias).raw() : nullptr;
    for (std::size_t b = 0; b < geo.B; ++b) {
      for (std::size_t co = 0; co < geo.Cout; ++co) {
        const T* o = go + (b * geo.Cout + co) * plane;
        if (db) {
          T acc{0};
          for (std::size_t i = 0; i < plane; ++i) acc += o[i];
          db[co] += acc;
        }
        for (std::size_t ci = 0; ci < geo.Cin; ++ci) {
          const T* in = xv + (b * geo.Cin + ci) * plane;
          T* din = dx ? dx + (b * geo.Cin + ci) * plane : nullptr;
          const std::size_t kbase = (co * geo.Cin + ci) * geo.kh * geo.kw;
          for (std::size_t ky = 0; ky < geo.kh; ++ky) {
            for (std::size_t kx = 0; kx < geo.kw; ++kx) {
              const std::size_t kidx = kbase + ky * geo.kw + kx;
              const T kv = wv[kidx];
              T acc{0};
              for_tap_rows(geo, ky, kx, [&](std::size_t src, std::size_t dst, std::size_t len) {
                const T* d = o + dst;
                if (dw) {
                  const T* s = in + src;
                  for (std::size_t i = 0; i < len; ++i) acc += d[i] * s[i];
                }
                if (din) {
                  T* t = din + src;
                  for (std::size_t i = 0; i < len; ++i) t[i] += kv * d[i];
                }
              });
              if (dw) dw[kidx] += acc;
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> b) {
  auto& g = same_graph(x, b, "add_channel_bias");
  const auto& s = x.shape();
  if (s.size() < 2 || b.shape() != Shape{s[1]}) {
    throw ShapeError("add_channel_bias: bias must have shape (C) for input " + to_string(s));
  }
  const std::size_t B = s[0], C = s[1], inner = x.value().numel() / (B * C);
  Tensor<T> out = x.value();
  const T* bv = b.value().raw();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.raw() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) o[i] += bv[c];
    }
  }
  const std::size_t ix = x.id(), ib = b.id();
  return g.record(std::move(out), {ix, ib}, [ix, ib, B, C, inner](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    if (g.requires_grad(ix)) {
      auto gi = g.grad(ix).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
    }
    if (g.requires_grad(ib)) {
      T* db = g.grad(ib).raw();
      for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
          const T* o = go + (n * C + c) * inner;
          T acc{0};
          for (std::size_t i = 0; i < inner; ++i) acc += o[i];
          db[c] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> matmul_batched(Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b, "matmul_batched");
  require_rank(a, 3, "matmul_batched");
  require_rank(b, 3, "matmul_batched");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as[0] != bs[0] || as[2] != bs[1]) {
    throw ShapeError("matmul_batched: incompatible shapes " + to_string(as) + " x " + to_string(bs));
  }
  const std::size_t B = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor<T> out(Shape{B, m, n});
  const T* av = a.value().raw();
  const T* bv = b.value().raw();
  T* ov = out.raw();
  for (std::size_t z = 0; z < B; ++z) {
    for (std::size_t i = 0; i < m; ++i) {
      T* orow = ov + (z * m + i) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aik = av[(z * m + i) * k + p];
        const T* brow = bv + (z * k + p) * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, B, m, k, n](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    const T* av = g.value(ia).raw();
    const T* bv = g.value(ib).raw();
    if (g.requires_grad(ia)) {
      // dA = dO * B^T
      T* da = g.grad(ia).raw();
      for (std::size_t z = 0; z < B; ++z) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* orow = go + (z * m + i) * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T* brow = bv + (z * k + p) * n;
            T acc{0};
            for (std::size_t j = 0; j < n; ++j) acc += orow[j] * brow[j];
            da[(z * m + i) * k + p] += acc;
          }
        }
      }
    }
    if (g.requires_grad(ib)) {
      // dB = A^T * dO
      T* db = g.grad(ib).raw();
      for (std::size_t z = 0; z < B; ++z) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* orow = go + (z * m + i) * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T aik = av[(z * m + i) * k + p];
            T* brow = db + (z * k + p) * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += aik * orow[j];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> transpose_last2(Var<T> x) {
  auto& g = x.graph();
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  const std::size_t r = s[s.size() - 2], c = s.back();
  const std::size_t batch = x.value().numel() / (r * c);
  Shape os = s;
  std::swap(os[os.size() - 2], os.back());
  Tensor<T> out(os);
  const T* xv = x.value().raw();
  for (std::size_t z = 0; z < batch; ++z) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[z * r * c + j * r + i] = xv[z * r * c + i * c + j];
    }
  }
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix, batch, r, c](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    T* gi = g.grad(ix).raw();
    for (std::size_t z = 0; z < batch; ++z) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gi[z * r * c + i * c + j] += go[z * r * c + j * r + i];
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto& g = x.graph();
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const auto go = g.grad_view(self).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ArgumentError("concat_channels: no inputs");
  auto& g = xs.front().graph();
  const Shape& s0 = xs.front().shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  const std::size_t B = s0[0];
  const std::size_t inner = xs.front().value().numel() / (B * s0[1]);
  std::size_t total_c = 0;
  std::vector<std::size_t> ids, channels;
  for (const auto& v : xs) {
    same_graph(xs.front(), v, "concat_channels");
    const Shape& s = v.shape();
    if (s.size() != s0.size() || s[0] != B ||
        !std::equal(s.begin() + 2, s.end(), s0.begin() + 2)) {
      throw ShapeError("concat_channels: incompatible shapes " + to_string(s0) + " and " +
                       to_string(s));
    }
    ids.push_back(v.id());
    channels.push_back(s[1]);
    total_c += s[1];
  }
  Shape os = s0;
  os[1] = total_c;
  Tensor<T> out(os);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const T* src = xs[k].value().raw() + b * channels[k] * inner;
      std::copy(src, src + channels[k] * inner, out.raw() + (b * total_c + offset) * inner);
      offset += channels[k];
    }
  }
  return g.record(std::move(out), ids, [ids, channels, B, inner, total_c](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.requires_grad(ids[k])) {
        T* gi = g.grad(ids[k]).raw();
        for (std::size_t b = 0; b < B; ++b) {
          const T* src = go + (b * total_c + offset) * inner;
          T* dst = gi + b * channels[k] * inner;
          for (std::size_t i = 0; i < channels[k] * inner; ++i) dst[i] += src[i];
        }
      }
      offset += channels[k];
    }
  });
}

namespace {

// Flat index pairs (shuffled, unshuffled) for a pixel shuffle of factor r.
template <typename F>
void for_shuffle_pairs(std::size_t B, std::size_t C, std::size_t H, std::size_t W, std::size_t r,
                       F&& f) {
  const std::size_t oh = H * r, ow = W * r;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t dy = 0; dy < r; ++dy) {
        for (std::size_t dx = 0; dx < r; ++dx) {
          const std::size_t ic = c * r * r + dy * r + dx;
          for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
              const std::size_t in = ((b * C * r * r + ic) * H + y) * W + x;
              const std::size_t out = ((b * C + c) * oh + r * y + dy) * ow + r * x + dx;
              f(out, in);
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> pixel_shuffle(Var<T> x, std::size_t r) {
  auto& g = x.graph();
  require_rank(x, 4, "pixel_shuffle");
  if (r < 1) throw ArgumentError("pixel_shuffle: factor must be >= 1");
  const auto& s = x.shape();
  if (s[1] % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(s[1]) + " not divisible by " +
                     std::to_string(r * r));
  }
  const std::size_t B = s[0], C = s[1] / (r * r), H = s[2], W = s[3];
  Tensor<T> out(Shape{B, C, H * r, W * r});
  const T* xv = x.value().raw();
  for_shuffle_pairs(B, C, H, W, r, [&](std::size_t o, std::size_t i) { out[o] = xv[i]; });
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix, B, C, H, W, r](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    T* gi = g.grad(ix).raw();
    for_shuffle_pairs(B, C, H, W, r, [&](std::size_t o, std::size_t i) { gi[i] += go[o]; });
  });
}

template <typename T>
Var<T> pixel_unshuffle(Var<T> x, std::size_t r) {
  auto& g = x.graph();
  require_rank(x, 4, "pixel_unshuffle");
  if (r < 1) throw ArgumentError("pixel_unshuffle: factor must be >= 1");
  const auto& s = x.shape();
  if (s[2] % r != 0 || s[3] % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims not divisible by " + std::to_string(r));
  }
  const std::size_t B = s[0], C = s[1], H = s[2] / r, W = s[3] / r;
  Tensor<T> out(Shape{B, C * r * r, H, W});
  const T* xv = x.value().raw();
  for_shuffle_pairs(B, C, H, W, r, [&](std::size_t o, std::size_t i) { out[i] = xv[o]; });
  const std::size_t ix = x.id();
  return g.record(std::move(out), {ix}, [ix, B, C, H, W, r](Graph<T>& g, std::size_t self) {
    const T* go = g.grad_view(self).raw();
    T* gi = g.grad(ix).raw();
    for_shuffle_pairs(B, C, H, W, r, [&](std::size_t o, std::size_t i) { gi[o] += go[i]; });
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& g = x.graph();
  T total{0};
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return g.record(Tensor<T>(Shape{1}, total), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const T go = g.grad_view(self)[0];
    for (auto& v : g.grad(ix).data()) v += go;
  });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b, "mse");
  require_same_shape(a, b, "mse");
  const auto av = a.value().data();
  const auto bv = b.value().data();
  T total{0};
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    total += d * d;
  }
  const T n = static_cast<T>(av.size());
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(Tensor<T>(Shape{1}, total / n), {ia, ib}, [ia, ib, n](Graph<T>& g, std::size_t self) {
    const T go = g.grad_view(self)[0] * T{2} / n;
    const auto av = g.value(ia).data();
    const auto bv = g.value(ib).data();
    if (g.requires_grad(ia)) {
      auto gi = g.grad(ia).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go * (av[i] - bv[i]);
    }
    if (g.requires_grad(ib)) {
      auto gi = g.grad(ib).data();
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] -= go * (av[i] - bv[i]);
    }
  });
}

template <typename T>
Var<T> sum_squares(Var<T> x) {
  auto& g = x.graph();
  T total{0};
  for (T v : x.value().data()) total += v * v;
  const std::size_t ix = x.id();
  return g.record(Tensor<T>(Shape{1}, total), {ix}, [ix](Graph<T>& g, std::size_t self) {
    const T go = g.grad_view(self)[0];
    const auto xv = g.value(ix).data();
    auto gi = g.grad(ix).data();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += T{2} * go * xv[i];
  });
}

#define ESR_INSTANTIATE_OPS(T)                                                        \
  template Var<T> add<T>(Var<T>, Var<T>);                                             \
  template Var<T> sub<T>(Var<T>, Var<T>);                                             \
  template Var<T> mul<T>(Var<T>, Var<T>);                                             \
  template Var<T> scale<T>(Var<T>, T);                                                \
  template Var<T> one_minus<T>(Var<T>);                                               \
  template Var<T> relu<T>(Var<T>);                                                    \
  template Var<T> sigmoid<T>(Var<T>);                                                 \
  template Var<T> softmax_lastdim<T>(Var<T>);                                         \
  template Var<T> layer_norm_channels<T>(Var<T>, Var<T>, Var<T>);                     \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>);                   \
  template Var<T> add_channel_bias<T>(Var<T>, Var<T>);                                \
  template Var<T> matmul_batched<T>(Var<T>, Var<T>);                                  \
  template Var<T> transpose_last2<T>(Var<T>);                                         \
  template Var<T> reshape<T>(Var<T>, Shape);                                          \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                     \
  template Var<T> pixel_shuffle<T>(Var<T>, std::size_t);                              \
  template Var<T> pixel_unshuffle<T>(Var<T>, std::size_t);                            \
  template Var<T> sum<T>(Var<T>);                                                     \
  template Var<T> mse<T>(Var<T>, Var<T>);                                             \
  template Var<T> sum_squares<T>(Var<T>);

ESR_INSTANTIATE_OPS(float)
ESR_INSTANTIATE_OPS(double)

}  // namespace esr::nd
