#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "esr/error.hpp"
#include "esr/ops.hpp"
#include "esr/tensor_io.hpp"

using namespace esr;
using namespace esr::nd;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("Tensor construction and shape checks") {
  const Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t[5] == 1.5f);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(numel({2, 3, 4}) == 24);
}

TEST_CASE("conv2d identity, bias broadcast and hand-computed 3x3") {
  Graph<double> g;
  const auto x = random_tensor({1, 3, 4, 5}, 1);
  Tensor<double> eye({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0;
  const auto y = conv2d<double>(g.constant(x), g.constant(eye), g.constant(Tensor<double>({3})));
  CHECK(y.value() == x);

  const auto w = random_tensor({2, 3, 3, 3}, 2);
  const Tensor<double> bias({2}, std::vector<double>{0.5, -2.0});
  const auto z = conv2d<double>(g.constant(Tensor<double>({1, 3, 4, 4})), g.constant(w), g.constant(bias));
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(z.value()[i] == 0.5);
    CHECK(z.value()[16 + i] == -2.0);
  }

  // Centre output of a 3x3 input is the full 9-term dot product; the corner
  // sees only 4 taps because of zero padding.
  const Tensor<double> in({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor<double> k({1, 1, 3, 3}, std::vector<double>{1, 0, -1, 2, 0.5, -2, 1, 1, 1});
  const auto c = conv2d(g.constant(in), g.constant(k));
  CHECK(c.value().at(0, 0, 1, 1) == doctest::Approx(1 * 1 + 2 * 0 + 3 * -1 + 4 * 2 + 5 * 0.5 + 6 * -2 + 7 + 8 + 9));
  CHECK(c.value().at(0, 0, 0, 0) == doctest::Approx(1 * 0.5 + 2 * -2 + 4 * 1 + 5 * 1));

  CHECK_THROWS_AS(conv2d(g.constant(in), g.constant(Tensor<double>({1, 2, 3, 3}))), ShapeError);
  CHECK_THROWS_AS(conv2d(g.constant(in), g.constant(Tensor<double>({1, 1, 2, 2}))), ShapeError);
}

TEST_CASE("relu and sigmoid pointwise") {
  Graph<double> g;
  const Tensor<double> x({4}, std::vector<double>{-1, 2, 0, -0.5});
  CHECK(relu(g.constant(x)).value() == Tensor<double>({4}, std::vector<double>{0, 2, 0, 0}));
  CHECK(sigmoid(g.constant(Tensor<double>({1}))).value()[0] == 0.5);
  Tensor<double> grid({201});
  for (std::size_t i = 0; i < 201; ++i) grid[i] = -10.0 + 0.1 * static_cast<double>(i);
  const auto s = sigmoid(g.constant(grid)).value();
  for (std::size_t i = 0; i < 201; ++i) {
    CHECK(s[i] == doctest::Approx(1.0 / (1.0 + std::exp(-grid[i]))).epsilon(1e-14));
    CHECK(s[i] > 0.0);
    CHECK(s[i] < 1.0);
    if (i > 0) CHECK(s[i] > s[i - 1]);
  }
}

TEST_CASE("softmax rows") {
  Graph<double> g;
  const auto u = softmax_lastdim(g.constant(Tensor<double>({1, 4}, 3.0))).value();
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25));
  const auto d = softmax_lastdim(g.constant(Tensor<double>({3}, std::vector<double>{1000, 0, 0}))).value();
  CHECK(d[0] == doctest::Approx(1.0));
  CHECK(d[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(d[1]));
  const auto r = softmax_lastdim(g.constant(random_tensor({3, 5}, 3, -5, 5))).value();
  for (std::size_t row = 0; row < 3; ++row) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(r[row * 5 + j] >= 0.0);
      CHECK(r[row * 5 + j] <= 1.0);
      sum += r[row * 5 + j];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("layer_norm_channels moments and shift invariance") {
  Graph<double> g;
  const auto gamma = g.constant(Tensor<double>({4}, 1.0));
  const auto beta = g.constant(Tensor<double>({4}));
  Tensor<double> constant({1, 4, 2, 2});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i) constant[c * 4 + i] = static_cast<double>(i) + 0.25;
  for (double v : layer_norm_channels(g.constant(constant), gamma, beta).value().data()) CHECK(v == 0.0);

  const auto x = random_tensor({2, 4, 3, 3}, 4, -3, 3);
  const auto y = layer_norm_channels(g.constant(x), gamma, beta).value();
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t p = 0; p < 9; ++p) {
      double mean = 0.0, var = 0.0;
      for (std::size_t c = 0; c < 4; ++c) mean += y[(b * 4 + c) * 9 + p] / 4.0;
      for (std::size_t c = 0; c < 4; ++c) var += std::pow(y[(b * 4 + c) * 9 + p] - mean, 2) / 4.0;
      CHECK(std::abs(mean) <= 1e-4);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
  }
  Tensor<double> shifted = x;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 9; ++p)
      for (std::size_t c = 0; c < 4; ++c) shifted[(b * 4 + c) * 9 + p] += static_cast<double>(p) - 2.5;
  const auto ys = layer_norm_channels(g.constant(shifted), gamma, beta).value();
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(ys[i] == doctest::Approx(y[i]).epsilon(1e-9));

  const Tensor<double> gm({4}, std::vector<double>{1, 2, 3, 4});
  const Tensor<double> bt({4}, std::vector<double>{0, 1, 0, -1});
  const auto z = layer_norm_channels(g.constant(x), g.constant(gm), g.constant(bt)).value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(z[c * 9] == doctest::Approx(y[c * 9] * gm[c] + bt[c]));
}

TEST_CASE("matmul, transpose, reshape, concat and elementwise ops") {
  Graph<double> g;
  const Tensor<double> a({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor<double> b({1, 2, 2}, std::vector<double>{5, 6, 7, 8});
  CHECK(matmul_batched(g.constant(a), g.constant(b)).value() ==
        Tensor<double>({1, 2, 2}, std::vector<double>{19, 22, 43, 50}));
  const Tensor<double> eye({1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  CHECK(matmul_batched(g.constant(a), g.constant(eye)).value() == a);
  CHECK(matmul_batched(g.constant(Tensor<double>({1, 2, 3})), g.constant(Tensor<double>({1, 3, 2}))).shape() ==
        Shape{1, 2, 2});
  CHECK_THROWS_AS(matmul_batched(g.constant(a), g.constant(Tensor<double>({1, 3, 2}))), ShapeError);

  CHECK(transpose_last2(g.constant(a)).value() == Tensor<double>({1, 2, 2}, std::vector<double>{1, 3, 2, 4}));
  CHECK(reshape(g.constant(a), {4}).shape() == Shape{4});
  CHECK_THROWS_AS(reshape(g.constant(a), {3}), ShapeError);

  const auto c = concat_channels<double>({g.constant(Tensor<double>({1, 1, 1, 2}, 1.0)),
                                          g.constant(Tensor<double>({1, 2, 1, 2}, 2.0))});
  CHECK(c.value() == Tensor<double>({1, 3, 1, 2}, std::vector<double>{1, 1, 2, 2, 2, 2}));

  CHECK(add(g.constant(a), g.constant(b)).value()[3] == 12);
  CHECK(sub(g.constant(a), g.constant(b)).value()[3] == -4);
  CHECK(mul(g.constant(a), g.constant(b)).value()[3] == 32);
  CHECK(scale(g.constant(a), 0.5).value()[3] == 2);
  CHECK(one_minus(g.constant(a)).value()[3] == -3);
  CHECK_THROWS_AS(add(g.constant(a), g.constant(Tensor<double>({4}))), ShapeError);

  CHECK(sum(g.constant(a)).value()[0] == 10);
  CHECK(sum_squares(g.constant(a)).value()[0] == 30);
  CHECK(mse(g.constant(a), g.constant(b)).value()[0] == 16);

  const auto biased = add_channel_bias(g.constant(Tensor<double>({1, 2, 1, 2})),
                                       g.constant(Tensor<double>({2}, std::vector<double>{3, -1})));
  CHECK(biased.value() == Tensor<double>({1, 2, 1, 2}, std::vector<double>{3, 3, -1, -1}));
}

TEST_CASE("pixel_shuffle layout and inverse") {
  Graph<double> g;
  const auto x = random_tensor({1, 4, 2, 2}, 5);
  CHECK(pixel_shuffle(g.constant(x), 1).value() == x);
  const auto y = pixel_shuffle(g.constant(x), 2).value();
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  for (std::size_t yy = 0; yy < 2; ++yy)
    for (std::size_t xx = 0; xx < 2; ++xx)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) CHECK(y.at(0, 0, 2 * yy + dy, 2 * xx + dx) == x.at(0, dy * 2 + dx, yy, xx));

  auto sorted_x = x.storage();
  auto sorted_y = y.storage();
  std::sort(sorted_x.begin(), sorted_x.end());
  std::sort(sorted_y.begin(), sorted_y.end());
  CHECK(sorted_x == sorted_y);

  const auto big = random_tensor({2, 18, 3, 4}, 6);
  CHECK(pixel_unshuffle(pixel_shuffle(g.constant(big), 3), 3).value() == big);
  CHECK_THROWS_AS(pixel_shuffle(g.constant(Tensor<double>({1, 3, 2, 2})), 2), ShapeError);
}

TEST_CASE("backward of add and concat distributes the upstream gradient") {
  Graph<double> g;
  Parameter<double> a(random_tensor({1, 2, 2, 2}, 7));
  Parameter<double> b(random_tensor({1, 1, 2, 2}, 8));
  const auto va = g.param(a), vb = g.param(b);
  const auto w = random_tensor({1, 3, 2, 2}, 9);
  const auto out = sum(mul(concat_channels<double>({va, vb}), g.constant(w)));
  g.backward(out);
  for (std::size_t i = 0; i < 8; ++i) CHECK((*g.grad_of(a))[i] == w[i]);
  for (std::size_t i = 0; i < 4; ++i) CHECK((*g.grad_of(b))[i] == w[8 + i]);

  Graph<double> h;
  Parameter<double> p(random_tensor({3}, 10));
  const auto vp = h.param(p);
  h.backward(sum(add(vp, vp)));
  for (double v : h.grad_of(p)->data()) CHECK(v == 2.0);
  CHECK(h.backward_calls() > 0);

  CHECK_THROWS_AS(h.backward(vp), ArgumentError);
}

TEST_CASE("tensor dump round trip and format") {
  const auto t = random_tensor({2, 3, 1}, 11);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TNSR");
  CHECK(bytes.size() == 4 + 4 + 3 * 4 + 6 * 8);
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // little-endian rank
  CHECK(read_tensor<double>(ss, DType::f64) == t);

  const auto dir = std::filesystem::temp_directory_path() / "esr_test_tensor_io";
  std::filesystem::create_directories(dir);
  const auto f32 = t.cast<float>();
  save_tensor((dir / "a.tnsr").string(), f32);
  CHECK(load_tensor<float>((dir / "a.tnsr").string()) == f32);
  save_tensor((dir / "b.tnsr").string(), t);
  CHECK(load_tensor<double>((dir / "b.tnsr").string()) == t);
  std::filesystem::remove_all(dir);

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensor<double>(bad, DType::f64), IoError);
}
