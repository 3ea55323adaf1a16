#include "esr/events.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "esr/error.hpp"

namespace esr::events {

namespace {

void check_event(const Event& e, std::uint32_t width, std::uint32_t height) {
  if (e.x >= width || e.y >= height) {
    throw BoundsError("event at (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                      ") outside " + std::to_string(width) + "x" + std::to_string(height) +
                      " sensor");
  }
  if (e.p != 1 && e.p != -1) {
    throw PolarityError("polarity must be +1 or -1, got " + std::to_string(e.p));
  }
  if (e.t < 0) {
    throw ArgumentError("negative timestamp " + std::to_string(e.t));
  }
}

void sort_by_time(std::vector<Event>& events) {
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

bool to_int(std::string_view token, std::int64_t& out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

}  // namespace

EventStream::EventStream(std::uint32_t width, std::uint32_t height, std::vector<Event> events)
    : width_(width), height_(height), events_(std::move(events)) {
  for (const auto& e : events_) check_event(e, width_, height_);
  sort_by_time(events_);
}

PolarFrame::PolarFrame(std::uint32_t w, std::uint32_t h, Window win)
    : width(w), height(h), pos(std::size_t(w) * h, 0.0), neg(std::size_t(w) * h, 0.0),
      window(win) {}

double PolarFrame::total() const {
  return std::accumulate(pos.begin(), pos.end(), 0.0) +
         std::accumulate(neg.begin(), neg.end(), 0.0);
}

EventStream parse_event_file(std::string_view text) {
  bool have_header = false;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Event> events;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    auto tokens = split_ws(line);
    if (tokens.empty() || tokens.front().front() == '#') {
      if (end == text.size()) break;
      continue;
    }

    if (!have_header) {
      std::int64_t w = 0;
      std::int64_t h = 0;
      if (tokens.size() != 2 || !to_int(tokens[0], w) || !to_int(tokens[1], h) || w < 1 ||
          h < 1 || w > UINT32_MAX || h > UINT32_MAX) {
        throw ParseError(line_no, "expected header 'width height'");
      }
      width = static_cast<std::uint32_t>(w);
      height = static_cast<std::uint32_t>(h);
      have_header = true;
    } else {
      std::int64_t t = 0;
      std::int64_t x = 0;
      std::int64_t y = 0;
      std::int64_t p = 0;
      if (tokens.size() != 4 || !to_int(tokens[0], t) || !to_int(tokens[1], x) ||
          !to_int(tokens[2], y) || !to_int(tokens[3], p)) {
        throw ParseError(line_no, "expected record 't x y p'");
      }
      if (t < 0) throw ParseError(line_no, "negative timestamp");
      if (x < 0 || y < 0 || x >= width || y >= height) {
        throw BoundsError("line " + std::to_string(line_no) + ": coordinate (" +
                          std::to_string(x) + "," + std::to_string(y) + ") outside " +
                          std::to_string(width) + "x" + std::to_string(height));
      }
      if (p != 1 && p != -1) {
        throw PolarityError("line " + std::to_string(line_no) + ": polarity must be 1 or -1");
      }
      events.push_back(Event{static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), t,
                             static_cast<int>(p)});
    }
    if (end == text.size()) break;
  }
  if (!have_header) throw ParseError(0, "missing 'width height' header");
  return EventStream(width, height, std::move(events));
}

std::string write_event_file(const EventStream& stream) {
  std::string out;
  out.reserve(16 + stream.size() * 24);
  out += std::to_string(stream.width());
  out += ' ';
  out += std::to_string(stream.height());
  out += '\n';
  for (const auto& e : stream.events()) {
    out += std::to_string(e.t);
    out += ' ';
    out += std::to_string(e.x);
    out += ' ';
    out += std::to_string(e.y);
    out += ' ';
    out += e.p > 0 ? "1" : "-1";
    out += '\n';
  }
  return out;
}

EventStream load_event_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_event_file(buf.str());
}

void save_event_file(const std::string& path, const EventStream& stream) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << write_event_file(stream);
  if (!out) throw IoError("write failed: " + path);
}

DecoupledStreams decouple(const EventStream& stream) {
  std::vector<Event> pos;
  std::vector<Event> neg;
  for (const auto& e : stream.events()) (e.p > 0 ? pos : neg).push_back(e);
  return {EventStream(stream.width(), stream.height(), std::move(pos)),
          EventStream(stream.width(), stream.height(), std::move(neg))};
}

EventStream merge(const EventStream& a, const EventStream& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw ShapeError("merge: streams have different resolutions");
  }
  std::vector<Event> all = a.events();
  all.insert(all.end(), b.events().begin(), b.events().end());
  return EventStream(a.width(), a.height(), std::move(all));
}

PolarFrame count_image(const EventStream& stream, Window window, std::uint32_t out_width,
                       std::uint32_t out_height) {
  if (window.start >= window.end) {
    throw ArgumentError("count_image: window start must precede end");
  }
  if (out_width != stream.width() || out_height != stream.height()) {
    throw ShapeError("count_image: output resolution must match the stream");
  }
  PolarFrame frame(out_width, out_height, window);
  const auto& ev = stream.events();
  auto first = std::lower_bound(ev.begin(), ev.end(), window.start,
                                [](const Event& e, Timestamp t) { return e.t < t; });
  for (auto it = first; it != ev.end() && it->t < window.end; ++it) {
    if (it->p > 0) {
      frame.pos_at(it->x, it->y) += 1.0;
    } else {
      frame.neg_at(it->x, it->y) += 1.0;
    }
  }
  return frame;
}

std::vector<PolarFrame> frame_sequence(const EventStream& stream, Timestamp window_len_us,
                                       std::size_t count, std::optional<Timestamp> t0) {
  if (count < 1) throw ArgumentError("frame_sequence: count must be >= 1");
  if (window_len_us < 1) throw ArgumentError("frame_sequence: window length must be >= 1");
  const Timestamp origin = t0.value_or(stream.empty() ? 0 : stream.events().front().t);
  std::vector<PolarFrame> frames;
  frames.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const Timestamp start = origin + static_cast<Timestamp>(k) * window_len_us;
    frames.push_back(
        count_image(stream, Window{start, start + window_len_us}, stream.width(), stream.height()));
  }
  return frames;
}

std::uint64_t round_count(double value) {
  if (!(value >= 0.5)) return 0;  // also catches NaN
  return static_cast<std::uint64_t>(std::floor(value + 0.5));
}

EventStream resample(const PolarFrame& frame) {
  const Timestamp start = frame.window.start;
  const double span = static_cast<double>(frame.window.length());
  std::vector<Event> events;
  auto emit = [&](std::uint32_t x, std::uint32_t y, double value, int p) {
    const std::uint64_t k = round_count(value);
    for (std::uint64_t i = 0; i < k; ++i) {
      const double offset = (static_cast<double>(i) + 0.5) * span / static_cast<double>(k);
      events.push_back(Event{x, y, start + static_cast<Timestamp>(std::floor(offset)), p});
    }
  };
  for (std::uint32_t y = 0; y < frame.height; ++y) {
    for (std::uint32_t x = 0; x < frame.width; ++x) {
      emit(x, y, frame.pos_at(x, y), 1);
      emit(x, y, frame.neg_at(x, y), -1);
    }
  }
  return EventStream(frame.width, frame.height, std::move(events));
}

EventStream downsample_events(const EventStream& stream, std::uint32_t factor) {
  if (factor == 0) throw ArgumentError("downsample_events: factor must be >= 1");
  const std::uint32_t out_w = stream.width() / factor;
  const std::uint32_t out_h = stream.height() / factor;
  std::vector<Event> events;
  events.reserve(stream.size());
  for (const auto& e : stream.events()) {
    if (e.x >= out_w * factor || e.y >= out_h * factor) continue;
    events.push_back(Event{e.x / factor, e.y / factor, e.t, e.p});
  }
  return EventStream(out_w, out_h, std::move(events));
}

}  // namespace esr::events
