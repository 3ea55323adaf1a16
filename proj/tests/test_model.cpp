#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "esr/checkpoint.hpp"
#include "esr/error.hpp"
#include "esr/model.hpp"

using namespace esr;
using namespace esr::model;
using events::PolarFrame;

namespace {

ModelConfig toy(Variant v, std::size_t C = 8, std::size_t N = 2, std::size_t M = 8, std::size_t S = 2) {
  ModelConfig c;
  c.channels = C;
  c.blocks = N;
  c.structures = M;
  c.scale = S;
  c.window = 3;
  c.variant = v;
  c.seed = 3;
  return c;
}

PolarFrame random_frame(std::uint32_t w, std::uint32_t h, std::uint64_t seed, events::Timestamp t0 = 0) {
  std::mt19937_64 rng(seed);
  PolarFrame f(w, h, {t0, t0 + 10000});
  for (std::size_t i = 0; i < f.pos.size(); ++i) {
    f.pos[i] = static_cast<double>(rng() % 3);
    f.neg[i] = static_cast<double>(rng() % 3);
  }
  return f;
}

std::vector<PolarFrame> random_frames(std::size_t n, std::uint32_t w, std::uint32_t h, std::uint64_t seed) {
  std::vector<PolarFrame> out;
  for (std::size_t t = 0; t < n; ++t) out.push_back(random_frame(w, h, seed + t, static_cast<events::Timestamp>(t) * 10000));
  return out;
}

template <typename T>
std::vector<nd::Tensor<T>> values_of(ModelState<T>& s) {
  std::vector<nd::Tensor<T>> out;
  for (auto* p : parameter_list(s)) out.push_back(p->value);
  return out;
}

std::size_t conv_params(std::size_t cin, std::size_t cout, std::size_t k, bool bias = true) {
  return cin * cout * k * k + (bias ? cout : 0);
}

}  // namespace

TEST_CASE("ModelConfig validation and key=value round trip") {
  ModelConfig c = toy(Variant::full);
  c.carry_state = false;
  c.scale_mode = bie::ScaleMode::pseudocode;
  c.init_gain = 2.5;
  CHECK(ModelConfig::from_kv(c.to_kv()) == c);
  for (auto bad : {&ModelConfig::channels, &ModelConfig::blocks, &ModelConfig::structures, &ModelConfig::window}) {
    ModelConfig b = toy(Variant::plain);
    b.*bad = 0;
    CHECK_THROWS_AS(b.validate(), ArgumentError);
  }
  ModelConfig s3 = toy(Variant::plain);
  s3.scale = 3;
  CHECK_THROWS_AS(s3.validate(), ArgumentError);
  s3.scale = 1;
  CHECK_NOTHROW(s3.validate());
  CHECK(parse_variant("plain") == Variant::plain);
  CHECK_THROWS_AS(parse_variant("wide"), ArgumentError);
}

TEST_CASE("init_model is deterministic with zero biases and unit norm gains") {
  auto a = init_model<float>(toy(Variant::full));
  auto b = init_model<float>(toy(Variant::full));
  CHECK(values_of(a) == values_of(b));
  auto cfg = toy(Variant::full);
  cfg.seed = 4;
  auto c = init_model<float>(cfg);
  CHECK(values_of(a) != values_of(c));

  const double bound = std::sqrt(1.0 / (9.0 * 8));  // 3x3 conv over 8 channels, default gain
  visit_parameters(a, [&](const std::string& name, nd::Parameter<float>& p) {
    const bool is_bias = name.size() > 5 && name.substr(name.size() - 5) == ".bias";
    if (is_bias || name.find("norm.beta") != std::string::npos || name.find("cir_bias") != std::string::npos) {
      for (float v : p.value.data()) CHECK(v == 0.0f);
    } else if (name.find("norm.gamma") != std::string::npos) {
      for (float v : p.value.data()) CHECK(v == 1.0f);
    }
    if (name == "layer0.spatial.0.conv1.weight")
      for (float v : p.value.data()) CHECK(std::abs(v) <= bound);
  });
}

TEST_CASE("count_params matches the closed form") {
  CHECK(conv_params(4, 4, 3) == 148);
  std::mt19937_64 rng(1);
  const auto single = bie::make_conv<float>(4, 4, 3, true, rng);
  CHECK(single.weight.numel() + single.bias->numel() == 148);

  const std::size_t C = 16, M = 16, S = 2, N = 2;
  const std::size_t side = conv_params(C, C, 3) + conv_params(2 * C, C, 3) + 2 * C + 2 * conv_params(C, M, 1) +
                           conv_params(M, C, 1) + 2 * conv_params(C, C, 1) + conv_params(M, C, 3, false);
  const std::size_t bie = 2 * side + C;
  const std::size_t block = 2 * conv_params(C, C, 3);
  const std::size_t plain = 2 * conv_params(1, C, 3) + N * (2 * block + bie) + conv_params(C, C, 1) +
                            2 * conv_params(C, S * S, 3);
  auto plain_state = init_model<float>(toy(Variant::plain, C, N, M, S));
  CHECK(count_params(plain_state) == plain);

  std::size_t enumerated = 0;
  visit_parameters(plain_state, [&](const std::string&, nd::Parameter<float>& p) { enumerated += p.numel(); });
  CHECK(enumerated == plain);

  const std::size_t full = 2 * conv_params(1, C, 3) + 2 * conv_params(2, C, 3) + N * (4 * block + 3 * bie) +
                           3 * conv_params(C, C, 1) + 2 * conv_params(C, S * S, 3);
  CHECK(count_params(init_model<float>(toy(Variant::full, C, N, M, S))) == full);

  const std::size_t mixed = conv_params(2, C, 3) + N * block + conv_params(C, C, 1) + conv_params(C, 2 * S * S, 3);
  CHECK(count_params(init_model<float>(toy(Variant::mixed, C, N, M, S))) == mixed);

  auto no_carry = toy(Variant::plain, C, N, M, S);
  no_carry.carry_state = false;
  CHECK(count_params(init_model<float>(no_carry)) == plain - conv_params(C, C, 1));
}

TEST_CASE("estimate_flops is linear in the frame area") {
  for (auto v : {Variant::mixed, Variant::plain, Variant::full}) {
    const auto c = toy(v);
    CHECK(estimate_flops(c, 12, 10) == 2 * estimate_flops(c, 6, 10));
    CHECK(estimate_flops(c, 6, 20) == 2 * estimate_flops(c, 6, 10));
  }
  // A lone residual block of the mixed variant: embed + block + head, hand-counted.
  const auto c = toy(Variant::mixed, 4, 1, 4, 2);
  auto m = c;
  m.carry_state = false;
  const std::uint64_t HW = 15;
  CHECK(estimate_flops(m, 3, 5) == 2 * HW * (2 * 4 * 9 + 2 * 4 * 4 * 9 + 4 * 8 * 9));
}

TEST_CASE("forward_step shapes and non-negative output") {
  for (auto v : {Variant::mixed, Variant::plain, Variant::full}) {
    const auto state = init_model<float>(toy(v));
    nd::Graph<float> g;
    const auto frame = to_input<float>(g, random_frame(6, 6, 1));
    const auto out = forward_step(g, state, frame, zero_input<float>(g, 6, 6), zero_cir<float>(g, state.config, 6, 6));
    CHECK(out.sr.shape() == nd::Shape{1, 2, 12, 12});
    for (float x : out.sr.value().data()) CHECK(x >= 0.0f);
    CHECK(out.cir.inter.valid());
    CHECK(out.cir.inner_p.valid() == (v == Variant::full));
  }

  const auto state = init_model<float>(toy(Variant::plain));
  nd::Graph<float> g;
  const auto a = to_input<float>(g, random_frame(6, 6, 1));
  const auto b = to_input<float>(g, random_frame(5, 6, 2));
  CHECK_THROWS_AS(forward_step(g, state, a, b, zero_cir<float>(g, state.config, 6, 6)), ShapeError);
  CHECK_THROWS_AS(forward_step(g, state, a, zero_input<float>(g, 6, 6), zero_cir<float>(g, state.config, 5, 5)),
                  ShapeError);
}

TEST_CASE("plain and full differ on identical seed and input") {
  const auto frames = random_frames(2, 5, 4, 7);
  const auto plain = super_resolve(init_model<double>(toy(Variant::plain)), frames);
  const auto full = super_resolve(init_model<double>(toy(Variant::full)), frames);
  REQUIRE(plain.size() == 2);
  CHECK(plain[1].pos != full[1].pos);
}

TEST_CASE("advance_cir applies ReLU(1x1 conv) or resets") {
  auto cfg = toy(Variant::full);
  auto state = init_model<double>(cfg);
  nd::Graph<double> g;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  auto noise = [&] {
    nd::Tensor<double> t({1, 8, 3, 3});
    for (auto& v : t.data()) v = n01(rng);
    return g.constant(t);
  };
  const CirSet<double> cir{noise(), noise(), noise()};
  const auto next = advance_cir(g, state, cir);
  for (const auto* v : {&next.inter, &next.inner_p, &next.inner_n})
    for (double x : v->value().data()) CHECK(x >= 0.0);

  for (auto& conv : state.advance) {
    conv.weight.value.fill(0.0);
    conv.bias->value.fill(0.0);
  }
  // Leaves snapshot parameter values on first use, so edits need a fresh graph.
  nd::Graph<double> g2;
  const CirSet<double> cir2{g2.constant(cir.inter.value()), g2.constant(cir.inner_p.value()),
                            g2.constant(cir.inner_n.value())};
  const auto zeroed = advance_cir(g2, state, cir2);
  for (const auto* v : {&zeroed.inter, &zeroed.inner_p, &zeroed.inner_n})
    for (double x : v->value().data()) CHECK(x == 0.0);

  cfg.carry_state = false;
  const auto reset = init_model<double>(cfg);
  CHECK(reset.advance.empty());
  const auto zeros = advance_cir(g, reset, cir);
  for (const auto* v : {&zeros.inter, &zeros.inner_p, &zeros.inner_n}) {
    CHECK(v->shape() == nd::Shape{1, 8, 3, 3});
    for (double x : v->value().data()) CHECK(x == 0.0);
  }
}

TEST_CASE("forward_sequence: lengths, first step, factorization without carry") {
  const auto frames = random_frames(3, 5, 4, 11);
  for (auto v : {Variant::mixed, Variant::plain, Variant::full}) {
    auto cfg = toy(v);
    const auto state = init_model<double>(cfg);
    const auto seq = super_resolve(state, frames);
    REQUIRE(seq.size() == 3);
    for (const auto& f : seq) {
      CHECK(f.width == 10);
      CHECK(f.height == 8);
    }
    CHECK(seq[2].window == frames[2].window);

    // T = 1 equals one step with zero history, whatever preceded it.
    const auto first = super_resolve(state, std::vector<PolarFrame>{frames[0]});
    CHECK(first[0] == seq[0]);

    cfg.carry_state = false;
    const auto reset = init_model<double>(cfg);
    const auto joint = super_resolve(reset, frames);
    for (std::size_t t = 0; t < 3; ++t) {
      // Without carried state a step only sees its own frame and the previous one.
      std::vector<PolarFrame> pair;
      if (t > 0) pair.push_back(frames[t - 1]);
      pair.push_back(frames[t]);
      CHECK(super_resolve(reset, pair).back() == joint[t]);
    }
  }
  nd::Graph<float> g;
  CHECK_THROWS_AS(forward_sequence<float>(g, init_model<float>(toy(Variant::plain)), {}), ArgumentError);
}

TEST_CASE("forward pass is deterministic and precision conversion is faithful") {
  const auto frames = random_frames(2, 4, 4, 13);
  auto s = init_model<float>(toy(Variant::full));
  CHECK(super_resolve(s, frames) == super_resolve(s, frames));
  auto d = convert_model<double>(s);
  auto back = convert_model<float>(d);
  CHECK(values_of(back) == values_of(s));
  const auto fs = super_resolve(s, frames);
  const auto ds = super_resolve(d, frames);
  for (std::size_t i = 0; i < fs[1].pos.size(); ++i) CHECK(fs[1].pos[i] == doctest::Approx(ds[1].pos[i]).epsilon(1e-4));
}

TEST_CASE("checkpoint round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "esr_test_model_ckpt";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.bmc").string();

  auto state = init_model<float>(toy(Variant::full));
  state.iteration = 42;
  KvConfig extra;
  extra.set("window_us", "5000");
  const nd::Tensor<float> aux({2}, std::vector<float>{1.5f, -2.0f});
  ckpt::save_model(path, state, extra, {{"aux", &aux}});

  std::ifstream magic(path, std::ios::binary);
  std::string first;
  std::getline(magic, first);
  CHECK(first == "BMC1");

  auto loaded = ckpt::load_model<float>(path);
  CHECK(loaded.state.config == state.config);
  CHECK(loaded.state.iteration == 42);
  CHECK(values_of(loaded.state) == values_of(state));
  CHECK(loaded.header.get_int("window_us") == 5000);
  CHECK(loaded.header.get_string("dtype") == "f32");
  REQUIRE(loaded.extras.count("aux") == 1);
  CHECK(loaded.extras.at("aux") == aux);

  // Stored as f32, read as f64.
  auto wide = ckpt::load_model<double>(path);
  CHECK(convert_model<float>(wide.state).layers[0].inter[0].a.query.weight.value ==
        state.layers[0].inter[0].a.query.weight.value);

  // A plain checkpoint cannot satisfy a full config.
  const std::string bad = (dir / "bad.bmc").string();
  ckpt::save_model(bad, init_model<float>(toy(Variant::plain)));
  {
    std::ifstream in(bad, std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto pos = text.find("variant=plain");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 13, "variant=full ");
    std::ofstream out(bad, std::ios::binary | std::ios::trunc);
    out << text;
  }
  CHECK_THROWS(ckpt::load_model<float>(bad));
  CHECK_THROWS_AS(ckpt::load_model<float>((dir / "missing.bmc").string()), IoError);
  std::filesystem::remove_all(dir);
}
