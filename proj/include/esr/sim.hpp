#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "esr/events.hpp"

namespace esr::sim {

enum class SceneKind { moving_bar, moving_disk, checker_translate };

SceneKind parse_scene_kind(std::string_view name);
std::string_view to_string(SceneKind kind);

/// Analytic synthetic scene. Velocities are in pixels per frame.
///
/// Shape sizes derive from the resolution: the bar is max(1, width/4)
/// columns wide, the disk radius is min(width, height)/4 and checker cells
/// are max(2, min(width, height)/4) pixels.
struct SceneSpec {
  SceneKind kind = SceneKind::moving_bar;
  std::uint32_t width = 16;
  std::uint32_t height = 16;
  double velocity_x = 1.0;
  double velocity_y = 0.0;
  std::uint32_t n_frames = 10;
  events::Timestamp frame_dt_us = 10000;
  double foreground = 200.0;
  double background = 50.0;
};

struct IntensityFrame {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<double> values;  // row-major, strictly positive

  double at(std::uint32_t x, std::uint32_t y) const { return values[std::size_t(y) * width + x]; }
};

struct SimParams {
  double theta = 0.2;  // contrast threshold in log units
  double eps = 1e-3;   // log(I + eps)
};

void validate(const SceneSpec& spec);
void validate(const SimParams& params);

IntensityFrame render_scene(const SceneSpec& spec, std::uint32_t frame_index);
std::vector<IntensityFrame> render_all(const SceneSpec& spec);

/// Ideal contrast-threshold camera. Per pixel the log intensity is linearly
/// interpolated between frames (frame k sits at k * dt_us); each time it moves
/// theta away from the pixel's reference level an event is emitted at the
/// interpolated crossing time and the reference steps by theta.
events::EventStream simulate_events(std::span<const IntensityFrame> frames,
                                    events::Timestamp dt_us, const SimParams& params);

/// Separable cubic-convolution resize (a = -0.5, half-pixel centres, edge
/// clamp). No output clamping; callers decide.
std::vector<double> resize_bicubic(std::span<const double> src, std::uint32_t width,
                                   std::uint32_t height, std::uint32_t out_width,
                                   std::uint32_t out_height);

/// Cubic convolution kernel with a = -0.5.
double cubic_kernel(double x);

/// Bicubic resize of an intensity frame; results are clamped to >= eps so
/// the log stays finite.
IntensityFrame bicubic_resize(const IntensityFrame& frame, std::uint32_t out_width,
                              std::uint32_t out_height, double eps = 1e-3);

struct EventPair {
  events::EventStream lr;
  events::EventStream hr;
};

/// Renders the scene at full resolution, bicubic-downsamples every frame by
/// `scale`, and simulates both sequences on the same time axis.
EventPair make_pair(const SceneSpec& spec, std::uint32_t scale, const SimParams& params);

/// Scene description as read from a key=value file.
struct SceneConfig {
  SceneSpec spec;
  SimParams params;
  std::uint32_t scale = 2;
};

SceneConfig parse_scene_config(std::string_view text);
SceneConfig load_scene_config(const std::string& path);

}  // namespace esr::sim
