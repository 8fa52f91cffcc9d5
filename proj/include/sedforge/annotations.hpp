#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sedforge/audio.hpp"
#include "sedforge/error.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge {

struct EventAnnotation {
  std::string class_name;
  double onset = 0.0;
  double offset = 0.0;
  std::string source_file;

  bool operator==(const EventAnnotation&) const = default;
};

/// K x T binary activity matrix. Several classes may be active in one frame.
struct EventRoll {
  std::vector<std::string> classes;
  Tensor<std::uint8_t> activity;  // [K, T]
  double frame_hop_seconds = 0.02;

  EventRoll() = default;
  EventRoll(std::vector<std::string> class_names, std::size_t num_frames,
            double hop)
      : classes(std::move(class_names)),
        activity({classes.size(), num_frames}),
        frame_hop_seconds(hop) {}

  std::size_t num_classes() const { return classes.size(); }
  std::size_t num_frames() const {
    return activity.rank() == 2 ? activity.dim(1) : 0;
  }
  std::uint8_t at(std::size_t k, std::size_t t) const { return activity.at(k, t); }
  std::uint8_t& at(std::size_t k, std::size_t t) { return activity.at(k, t); }

  bool operator==(const EventRoll&) const = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  const char sep = line.find('\t') != std::string_view::npos ? '\t' : ' ';
  std::size_t start = 0;
  while (start <= line.size()) {
    const auto end = line.find(sep, start);
    const auto piece =
        trim(line.substr(start, end == std::string_view::npos ? end : end - start));
    if (!piece.empty()) out.push_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace detail

/// Parses "onset<TAB>offset<TAB>class" lines. Blank lines are skipped.
inline std::vector<EventAnnotation> parse_annotations(
    std::string_view text, const std::string& source_file = {}) {
  std::vector<EventAnnotation> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_fields(line);
    if (fields.size() != 3)
      throw ParseError(line_no, "expected 3 fields (onset, offset, class), got " +
                                    std::to_string(fields.size()));
    EventAnnotation ev;
    if (!detail::parse_double(fields[0], ev.onset) ||
        !detail::parse_double(fields[1], ev.offset))
      throw ParseError(line_no, "onset/offset are not numbers");
    ev.class_name = std::string(fields[2]);
    ev.source_file = source_file;
    if (ev.onset < 0.0)
      throw ValidationError("line " + std::to_string(line_no) + ": negative onset");
    if (ev.offset <= ev.onset)
      throw ValidationError("line " + std::to_string(line_no) +
                            ": offset must be greater than onset");
    out.push_back(std::move(ev));
  }
  return out;
}

inline std::string format_annotations(const std::vector<EventAnnotation>& events) {
  std::string out;
  char buf[64];
  for (const auto& ev : events) {
    std::snprintf(buf, sizeof buf, "%.6f\t%.6f\t", ev.onset, ev.offset);
    out += buf;
    out += ev.class_name;
    out += '\n';
  }
  return out;
}

inline std::vector<EventAnnotation> read_annotations(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return parse_annotations(text, path.filename().string());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path.string() + ": " + e.what());
  }
}

inline void write_annotations(const std::filesystem::path& path,
                              const std::vector<EventAnnotation>& events) {
  write_file_bytes(path, format_annotations(events));
}

/// Frame t spans [t*hop, (t+1)*hop) and is active when that span intersects
/// [onset, offset) by a positive amount. A small tolerance in frame units
/// absorbs decimal round-off from annotation files.
inline std::pair<std::size_t, std::size_t> active_frame_range(
    double onset, double offset, double hop, std::size_t num_frames) {
  constexpr double kTol = 1e-6;
  const double first = std::floor(onset / hop + kTol);
  const double last = std::ceil(offset / hop - kTol);
  const auto clampf = [num_frames](double v) {
    return static_cast<std::size_t>(
        std::clamp(v, 0.0, static_cast<double>(num_frames)));
  };
  return {clampf(first), clampf(last)};
}

inline EventRoll build_target_matrix(const std::vector<EventAnnotation>& annotations,
                                     const std::vector<std::string>& classes,
                                     std::size_t num_frames,
                                     double frame_hop_seconds) {
  if (num_frames == 0) throw ShapeError("target matrix needs at least one frame");
  if (!(frame_hop_seconds > 0)) throw ConfigError("frame hop must be positive");
  std::vector<std::string> unknown;
  for (const auto& ev : annotations)
    if (std::find(classes.begin(), classes.end(), ev.class_name) == classes.end() &&
        std::find(unknown.begin(), unknown.end(), ev.class_name) == unknown.end())
      unknown.push_back(ev.class_name);
  if (!unknown.empty()) {
    std::string msg = "unknown event classes:";
    for (const auto& u : unknown) msg += " " + u;
    throw ValidationError(msg);
  }
  EventRoll roll(classes, num_frames, frame_hop_seconds);
  for (const auto& ev : annotations) {
    const auto k = static_cast<std::size_t>(
        std::find(classes.begin(), classes.end(), ev.class_name) - classes.begin());
    const auto [first, last] =
        active_frame_range(ev.onset, ev.offset, frame_hop_seconds, num_frames);
    for (std::size_t t = first; t < last; ++t) roll.at(k, t) = 1;
  }
  return roll;
}

/// Maximal runs of active frames become events [start*hop, end*hop).
inline std::vector<EventAnnotation> roll_to_events(const EventRoll& roll) {
  std::vector<EventAnnotation> out;
  const std::size_t T = roll.num_frames();
  for (std::size_t k = 0; k < roll.num_classes(); ++k) {
    std::size_t t = 0;
    while (t < T) {
      if (!roll.at(k, t)) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < T && roll.at(k, t)) ++t;
      out.push_back({roll.classes[k], start * roll.frame_hop_seconds,
                     t * roll.frame_hop_seconds, {}});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.onset < b.onset;
  });
  return out;
}

}  // namespace sedforge
