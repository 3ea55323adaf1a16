#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace esr::events {

using Timestamp = std::int64_t;  // microseconds

struct Event {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  Timestamp t = 0;
  int p = 1;  // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

/// Half-open time interval [start, end) in microseconds.
struct Window {
  Timestamp start = 0;
  Timestamp end = 1;

  Timestamp length() const { return end - start; }
  bool contains(Timestamp t) const { return t >= start && t < end; }
  friend bool operator==(const Window&, const Window&) = default;
};

/// Events of one sensor, always bounds-checked and sorted by timestamp.
///
/// Construction validates every event (coordinates inside the sensor,
/// polarity exactly +1/-1, t >= 0) and stable-sorts by t, so equal
/// timestamps keep their input order.
class EventStream {
 public:
  EventStream() = default;
  EventStream(std::uint32_t width, std::uint32_t height, std::vector<Event> events = {});

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }
  const std::vector<Event>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  bool empty() const { return events_.empty(); }

  friend bool operator==(const EventStream&, const EventStream&) = default;

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<Event> events_;
};

/// Two-channel event count image over one window. Maps are row-major H x W.
struct PolarFrame {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<double> pos;
  std::vector<double> neg;
  Window window;

  PolarFrame() = default;
  PolarFrame(std::uint32_t w, std::uint32_t h, Window win);

  std::size_t index(std::uint32_t x, std::uint32_t y) const { return std::size_t(y) * width + x; }
  double& pos_at(std::uint32_t x, std::uint32_t y) { return pos[index(x, y)]; }
  double& neg_at(std::uint32_t x, std::uint32_t y) { return neg[index(x, y)]; }
  double pos_at(std::uint32_t x, std::uint32_t y) const { return pos[index(x, y)]; }
  double neg_at(std::uint32_t x, std::uint32_t y) const { return neg[index(x, y)]; }
  double total() const;

  friend bool operator==(const PolarFrame&, const PolarFrame&) = default;
};

EventStream parse_event_file(std::string_view text);
std::string write_event_file(const EventStream& stream);

EventStream load_event_file(const std::string& path);
void save_event_file(const std::string& path, const EventStream& stream);

struct DecoupledStreams {
  EventStream positive;
  EventStream negative;
};

DecoupledStreams decouple(const EventStream& stream);

/// Inverse of decouple up to ordering of simultaneous events: concatenates and
/// stable-sorts by t (positive events first among ties).
EventStream merge(const EventStream& a, const EventStream& b);

PolarFrame count_image(const EventStream& stream, Window window, std::uint32_t out_width,
                       std::uint32_t out_height);

/// `count` consecutive frames of length `window_len_us` starting at `t0`
/// (default: first event timestamp, or 0 for an empty stream).
std::vector<PolarFrame> frame_sequence(const EventStream& stream, Timestamp window_len_us,
                                       std::size_t count,
                                       std::optional<Timestamp> t0 = std::nullopt);

/// Round-half-up to a non-negative integer count; values below 0.5 give 0.
std::uint64_t round_count(double value);

/// Converts a (possibly real-valued) count frame back to events, spreading k
/// events of a pixel uniformly at mid-bin positions of the window.
EventStream resample(const PolarFrame& frame);

EventStream downsample_events(const EventStream& stream, std::uint32_t factor);

}  // namespace esr::events
