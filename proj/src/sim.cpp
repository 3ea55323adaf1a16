#include "esr/sim.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <cmath>

#include "esr/error.hpp"
#include "esr/kv_config.hpp"

namespace esr::sim {

namespace {

std::int64_t wrap(std::int64_t v, std::int64_t n) {
  const std::int64_t r = v % n;
  return r < 0 ? r + n : r;
}

double wrap_distance(double d, double n) {
  d = std::fmod(d, n);
  if (d < 0) d += n;
  return std::min(d, n - d);
}

}  // namespace

SceneKind parse_scene_kind(std::string_view name) {
  if (name == "moving_bar") return SceneKind::moving_bar;
  if (name == "moving_disk") return SceneKind::moving_disk;
  if (name == "checker_translate") return SceneKind::checker_translate;
  throw ArgumentError("unknown scene kind '" + std::string(name) + "'");
}

std::string_view to_string(SceneKind kind) {
  switch (kind) {
    case SceneKind::moving_bar:
      return "moving_bar";
    case SceneKind::moving_disk:
      return "moving_disk";
    case SceneKind::checker_translate:
      return "checker_translate";
  }
  return "?";
}

void validate(const SceneSpec& spec) {
  if (spec.width < 1 || spec.height < 1) throw ArgumentError("scene: width/height must be >= 1");
  if (spec.n_frames < 2) throw ArgumentError("scene: n_frames must be >= 2");
  if (spec.frame_dt_us < 1) throw ArgumentError("scene: frame_dt_us must be >= 1");
  if (!(spec.foreground > 0 && spec.foreground <= 255) ||
      !(spec.background > 0 && spec.background <= 255)) {
    throw ArgumentError("scene: intensities must lie in (0, 255]");
  }
}

void validate(const SimParams& params) {
  if (!(params.theta > 0)) throw ArgumentError("sim: theta must be > 0");
  if (!(params.eps >= 0)) throw ArgumentError("sim: eps must be >= 0");
}

IntensityFrame render_scene(const SceneSpec& spec, std::uint32_t frame_index) {
  validate(spec);
  if (frame_index >= spec.n_frames) {
    throw ArgumentError("render_scene: frame index " + std::to_string(frame_index) +
                        " out of range");
  }
  IntensityFrame frame{spec.width, spec.height,
                       std::vector<double>(std::size_t(spec.width) * spec.height, spec.background)};
  const auto w = static_cast<std::int64_t>(spec.width);
  const auto h = static_cast<std::int64_t>(spec.height);
  const double i = frame_index;

  switch (spec.kind) {
    case SceneKind::moving_bar: {
      const std::int64_t bar = std::max<std::int64_t>(1, w / 4);
      const std::int64_t offset = wrap(std::llround(i * spec.velocity_x), w);
      for (std::int64_t c = 0; c < bar; ++c) {
        const std::int64_t x = wrap(offset + c, w);
        for (std::int64_t y = 0; y < h; ++y) frame.values[y * w + x] = spec.foreground;
      }
      break;
    }
    case SceneKind::moving_disk: {
      const double radius = std::min(w, h) / 4.0;
      const double cx = w / 2.0 + i * spec.velocity_x;
      const double cy = h / 2.0 + i * spec.velocity_y;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double dx = wrap_distance(x + 0.5 - cx, double(w));
          const double dy = wrap_distance(y + 0.5 - cy, double(h));
          if (dx * dx + dy * dy <= radius * radius) frame.values[y * w + x] = spec.foreground;
        }
      }
      break;
    }
    case SceneKind::checker_translate: {
      const std::int64_t cell = std::max<std::int64_t>(2, std::min(w, h) / 4);
      const std::int64_t ox = std::llround(i * spec.velocity_x);
      const std::int64_t oy = std::llround(i * spec.velocity_y);
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const std::int64_t cx = wrap(x - ox, 2 * cell) / cell;
          const std::int64_t cy = wrap(y - oy, 2 * cell) / cell;
          frame.values[y * w + x] = ((cx + cy) % 2 == 0) ? spec.foreground : spec.background;
        }
      }
      break;
    }
  }
  return frame;
}

std::vector<IntensityFrame> render_all(const SceneSpec& spec) {
  std::vector<IntensityFrame> frames;
  frames.reserve(spec.n_frames);
  for (std::uint32_t i = 0; i < spec.n_frames; ++i) frames.push_back(render_scene(spec, i));
  return frames;
}

events::EventStream simulate_events(std::span<const IntensityFrame> frames,
                                    events::Timestamp dt_us, const SimParams& params) {
  validate(params);
  if (frames.size() < 2) throw ArgumentError("simulate_events: need at least two frames");
  if (dt_us < 1) throw ArgumentError("simulate_events: dt must be >= 1");
  const std::uint32_t width = frames.front().width;
  const std::uint32_t height = frames.front().height;
  for (const auto& f : frames) {
    if (f.width != width || f.height != height ||
        f.values.size() != std::size_t(width) * height) {
      throw ArgumentError("simulate_events: frames have mismatched resolutions");
    }
  }

  const std::size_t pixels = std::size_t(width) * height;
  std::vector<double> log_prev(pixels);
  std::vector<double> ref(pixels);
  for (std::size_t k = 0; k < pixels; ++k) {
    log_prev[k] = std::log(frames.front().values[k] + params.eps);
    ref[k] = log_prev[k];
  }

  std::vector<events::Event> out;
  const double theta = params.theta;
  for (std::size_t f = 1; f < frames.size(); ++f) {
    const double t0 = static_cast<double>(f - 1) * static_cast<double>(dt_us);
    const double span = static_cast<double>(dt_us);
    for (std::size_t k = 0; k < pixels; ++k) {
      const double l0 = log_prev[k];
      const double l1 = std::log(frames[f].values[k] + params.eps);
      const double dl = l1 - l0;
      const auto x = static_cast<std::uint32_t>(k % width);
      const auto y = static_cast<std::uint32_t>(k / width);
      if (dl > 0) {
        while (l1 - ref[k] >= theta) {
          ref[k] += theta;
          const double t = t0 + (ref[k] - l0) / dl * span;
          out.push_back({x, y, std::llround(t), 1});
        }
      } else if (dl < 0) {
        while (ref[k] - l1 >= theta) {
          ref[k] -= theta;
          const double t = t0 + (ref[k] - l0) / dl * span;
          out.push_back({x, y, std::llround(t), -1});
        }
      }
      log_prev[k] = l1;
    }
  }
  return events::EventStream(width, height, std::move(out));
}

double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace {

// Four source indices and kernel weights per output sample along one axis.
struct Taps {
  std::vector<std::array<std::uint32_t, 4>> index;
  std::vector<std::array<double, 4>> weight;
};

Taps make_taps(std::uint32_t in_len, std::uint32_t out_len) {
  Taps taps;
  taps.index.resize(out_len);
  taps.weight.resize(out_len);
  const double ratio = static_cast<double>(in_len) / out_len;
  for (std::uint32_t o = 0; o < out_len; ++o) {
    const double src = (o + 0.5) * ratio - 0.5;
    const double base = std::floor(src);
    const double frac = src - base;
    for (int j = 0; j < 4; ++j) {
      const auto raw = static_cast<std::int64_t>(base) + j - 1;
      taps.index[o][j] = static_cast<std::uint32_t>(std::clamp<std::int64_t>(raw, 0, in_len - 1));
      taps.weight[o][j] = cubic_kernel(frac - (j - 1));
    }
  }
  return taps;
}

}  // namespace

std::vector<double> resize_bicubic(std::span<const double> src, std::uint32_t width,
                                   std::uint32_t height, std::uint32_t out_width,
                                   std::uint32_t out_height) {
  if (out_width < 1 || out_height < 1) throw ArgumentError("resize: output dims must be >= 1");
  if (src.size() != std::size_t(width) * height) throw ShapeError("resize: buffer size mismatch");
  if (width == out_width && height == out_height) return {src.begin(), src.end()};

  const Taps tx = make_taps(width, out_width);
  const Taps ty = make_taps(height, out_height);

  std::vector<double> rows(std::size_t(height) * out_width);
  for (std::uint32_t y = 0; y < height; ++y) {
    for (std::uint32_t x = 0; x < out_width; ++x) {
      double acc = 0;
      for (int j = 0; j < 4; ++j) acc += tx.weight[x][j] * src[std::size_t(y) * width + tx.index[x][j]];
      rows[std::size_t(y) * out_width + x] = acc;
    }
  }
  std::vector<double> out(std::size_t(out_height) * out_width);
  for (std::uint32_t y = 0; y < out_height; ++y) {
    for (std::uint32_t x = 0; x < out_width; ++x) {
      double acc = 0;
      for (int j = 0; j < 4; ++j) acc += ty.weight[y][j] * rows[std::size_t(ty.index[y][j]) * out_width + x];
      out[std::size_t(y) * out_width + x] = acc;
    }
  }
  return out;
}

IntensityFrame bicubic_resize(const IntensityFrame& frame, std::uint32_t out_width,
                              std::uint32_t out_height, double eps) {
  IntensityFrame out{out_width, out_height,
                     resize_bicubic(frame.values, frame.width, frame.height, out_width, out_height)};
  for (auto& v : out.values) v = std::max(v, eps);
  return out;
}

EventPair make_pair(const SceneSpec& spec, std::uint32_t scale, const SimParams& params) {
  validate(spec);
  if (scale < 1) throw ArgumentError("make_pair: scale must be >= 1");
  if (spec.width % scale != 0 || spec.height % scale != 0) {
    throw ArgumentError("make_pair: scene " + std::to_string(spec.width) + "x" +
                        std::to_string(spec.height) + " not divisible by scale " +
                        std::to_string(scale));
  }
  const auto hr_frames = render_all(spec);
  std::vector<IntensityFrame> lr_frames;
  lr_frames.reserve(hr_frames.size());
  for (const auto& f : hr_frames) {
    lr_frames.push_back(bicubic_resize(f, spec.width / scale, spec.height / scale, params.eps));
  }
  return {simulate_events(lr_frames, spec.frame_dt_us, params),
          simulate_events(hr_frames, spec.frame_dt_us, params)};
}

SceneConfig parse_scene_config(std::string_view text) {
  const KvConfig kv = KvConfig::parse(text);
  SceneConfig cfg;
  auto& s = cfg.spec;
  s.kind = parse_scene_kind(kv.get_string("kind"));
  const auto dim = [&](const char* key) {
    const auto v = kv.get_int(key);
    if (v < 1 || v > 1 << 16) throw ArgumentError(std::string("scene: bad ") + key);
    return static_cast<std::uint32_t>(v);
  };
  s.width = dim("width");
  s.height = dim("height");
  s.velocity_x = kv.get_double("velocity_x", 1.0);
  s.velocity_y = kv.get_double("velocity_y", 0.0);
  const auto n = kv.get_int("n_frames", 10);
  if (n < 2 || n > 1 << 20) throw ArgumentError("scene: n_frames must be >= 2");
  s.n_frames = static_cast<std::uint32_t>(n);
  s.frame_dt_us = kv.get_int("frame_dt_us", 10000);
  s.foreground = kv.get_double("foreground", 200.0);
  s.background = kv.get_double("background", 50.0);
  cfg.params.theta = kv.get_double("theta", 0.2);
  cfg.params.eps = kv.get_double("eps", 1e-3);
  const auto scale = kv.get_int("scale", 2);
  if (scale < 1 || scale > 64) throw ArgumentError("scene: scale must be in [1, 64]");
  cfg.scale = static_cast<std::uint32_t>(scale);
  validate(s);
  validate(cfg.params);
  return cfg;
}

SceneConfig load_scene_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scene_config(buf.str());
}

}  // namespace esr::sim
