#include "esr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "esr/error.hpp"
#include "esr/sim.hpp"

namespace esr::eval {

namespace {

double squared_diff(const PolarFrame& a, const PolarFrame& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ShapeError("rmse: frame sizes differ (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pos.size(); ++i) {
    const double dp = a.pos[i] - b.pos[i];
    const double dn = a.neg[i] - b.neg[i];
    acc += dp * dp + dn * dn;
  }
  return acc;
}

}  // namespace

double rmse(const std::vector<PolarFrame>& a, const std::vector<PolarFrame>& b) {
  if (a.size() != b.size()) throw ShapeError("rmse: sequences differ in length");
  if (a.empty()) throw ShapeError("rmse: empty sequences");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    acc += squared_diff(a[t], b[t]);
    n += 2 * a[t].pos.size();
  }
  return std::sqrt(acc / static_cast<double>(n));
}

double rmse(const PolarFrame& a, const PolarFrame& b) {
  return std::sqrt(squared_diff(a, b) / static_cast<double>(2 * a.pos.size()));
}

PolarFrame bicubic_upsample_frame(const PolarFrame& frame, std::uint32_t scale) {
  if (scale < 1) throw ArgumentError("bicubic_upsample_frame: scale must be >= 1");
  const std::uint32_t w = frame.width * scale, h = frame.height * scale;
  PolarFrame out(w, h, frame.window);
  auto up = [&](const std::vector<double>& src, std::vector<double>& dst) {
    dst = sim::resize_bicubic(src, frame.width, frame.height, w, h);
    for (double& v : dst) v = std::max(0.0, v);
  };
  up(frame.pos, out.pos);
  up(frame.neg, out.neg);
  return out;
}

const MethodResult& EvalReport::at(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return m;
  throw ArgumentError("no method '" + method + "' in report");
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "method,rmse,params,flops\n";
  for (const auto& m : methods) out << m.method << ',' << m.rmse << ',' << m.params << ',' << m.flops << '\n';
  return out.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %12s %12s %16s\n", "method", "rmse", "params", "flops");
  out << line;
  for (const auto& m : methods) {
    std::snprintf(line, sizeof line, "%-10s %12.6f %12zu %16llu\n", m.method.c_str(), m.rmse, m.params,
                  static_cast<unsigned long long>(m.flops));
    out << line;
  }
  return out.str();
}

template <typename T>
EvalReport evaluate(const model::ModelState<T>& state, const std::vector<train::Sample>& dataset) {
  if (dataset.empty()) throw ArgumentError("evaluate: empty dataset");
  const auto S = static_cast<std::uint32_t>(state.config.scale);
  MethodResult net{"bmcnet", 0.0, model::count_params(state), 0, {}};
  MethodResult bicubic{"bicubic", 0.0, 0, 0, {}};
  for (const auto& sample : dataset) {
    train::validate_sample(sample, S);
    const auto sr = model::super_resolve(state, sample.lr_frames);
    std::vector<PolarFrame> base;
    for (const auto& f : sample.lr_frames) base.push_back(bicubic_upsample_frame(f, S));
    net.per_sequence.push_back(rmse(sr, sample.hr_frames));
    bicubic.per_sequence.push_back(rmse(base, sample.hr_frames));
  }
  const auto& lr = dataset.front().lr_frames.front();
  net.flops = model::estimate_flops(state.config, lr.height, lr.width);
  for (auto* m : {&net, &bicubic}) {
    double acc = 0.0;
    for (double r : m->per_sequence) acc += r;
    m->rmse = acc / static_cast<double>(m->per_sequence.size());
  }
  return EvalReport{{net, bicubic}};
}

std::string render_ppm(const PolarFrame& frame) {
  double peak = 0.0;
  for (std::size_t i = 0; i < frame.pos.size(); ++i) peak = std::max({peak, frame.pos[i], frame.neg[i]});
  auto level = [&](double count) -> int {
    if (peak <= 0.0 || count <= 0.0) return 0;
    return static_cast<int>(std::lround(255.0 * std::min(1.0, count / peak)));
  };
  std::string out = "P6\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) + "\n255\n";
  out.reserve(out.size() + frame.pos.size() * 3);
  for (std::size_t i = 0; i < frame.pos.size(); ++i) {
    const double p = std::max(0.0, frame.pos[i]);
    const double n = std::max(0.0, frame.neg[i]);
    int r = 255, g = 255, b = 255;
    if (p > n) {
      const int v = level(p);
      r = g = 255 - v;
    } else if (n > p) {
      const int v = level(n);
      g = b = 255 - v;
    } else if (p > 0.0) {
      const int v = level(p);
      g = 255 - v;
      r = b = 255 - v / 2;
    }
    out.push_back(static_cast<char>(r));
    out.push_back(static_cast<char>(g));
    out.push_back(static_cast<char>(b));
  }
  return out;
}

void render_frame(const PolarFrame& frame, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = render_ppm(frame);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path + "' failed");
}

template EvalReport evaluate<float>(const model::ModelState<float>&, const std::vector<train::Sample>&);
template EvalReport evaluate<double>(const model::ModelState<double>&, const std::vector<train::Sample>&);

}  // namespace esr::eval
