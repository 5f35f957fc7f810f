#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "trap.hpp"

namespace phrap {

enum class Shape { Linear, Smoothstep, SineSquared };

inline std::string to_string(Shape s) {
  switch (s) {
    case Shape::Linear: return "linear";
    case Shape::Smoothstep: return "smoothstep";
    case Shape::SineSquared: return "sine_squared";
  }
  return "linear";
}

inline std::optional<Shape> shape_from_string(const std::string& s) {
  if (s == "linear") return Shape::Linear;
  if (s == "smoothstep") return Shape::Smoothstep;
  if (s == "sine_squared") return Shape::SineSquared;
  return std::nullopt;
}

// Interpolation weight on [0, 1]; exactly 0 and 1 at the ends.
inline double shape_weight(Shape shape, double s) {
  if (s <= 0.0) return 0.0;
  if (s >= 1.0) return 1.0;
  switch (shape) {
    case Shape::Linear: return s;
    case Shape::Smoothstep: return s * s * (3.0 - 2.0 * s);
    case Shape::SineSquared: {
      const double h = std::sin(0.5 * kPi * s);
      return h * h;
    }
  }
  return s;
}

inline double blend(double a, double b, double w) { return (1.0 - w) * a + w * b; }

// Fields and shims follow `w`, dc_scale follows `w_dc`.
inline ControlField blend(const ControlField& a, const ControlField& b, double w, double w_dc) {
  ControlField c;
  for (int i = 0; i < 3; ++i) c.e_field(i) = blend(a.e_field(i), b.e_field(i), w);
  c.rot_xy = blend(a.rot_xy, b.rot_xy, w);
  c.rot_xz = blend(a.rot_xz, b.rot_xz, w);
  c.rot_yz = blend(a.rot_yz, b.rot_yz, w);
  c.radial_split_shim = blend(a.radial_split_shim, b.radial_split_shim, w);
  c.dc_scale = blend(a.dc_scale, b.dc_scale, w_dc);
  return c;
}

struct Segment {
  double duration = 0.0;  // s
  ControlField start;
  ControlField end;
  Shape shape = Shape::SineSquared;
  Shape dc_shape = Shape::Linear;
  std::string tag;

  ControlField at(double s) const {
    return blend(start, end, shape_weight(shape, s), shape_weight(dc_shape, s));
  }
  bool is_static() const { return start == end; }
};

class Waveform {
 public:
  Waveform() = default;

  // Segments must join continuously; durations must be positive.
  explicit Waveform(std::vector<Segment> segments) {
    for (auto& s : segments) append(std::move(s));
  }

  static Waveform hold(const ControlField& f, double duration, std::string tag = "") {
    return Waveform({Segment{duration, f, f, Shape::Linear, Shape::Linear, std::move(tag)}});
  }

  void append(Segment s) {
    if (!(s.duration > 0.0) || !std::isfinite(s.duration))
      throw WaveformError("segment duration must be positive");
    if (!s.start.finite() || !s.end.finite()) throw WaveformError("segment has non-finite controls");
    if (!segments_.empty() && !(segments_.back().end == s.start))
      throw WaveformError("segment " + std::to_string(segments_.size()) +
                          " does not start where the previous one ends");
    starts_.push_back(total_);
    total_ += s.duration;
    segments_.push_back(std::move(s));
  }

  // Append a segment starting from the current end point.
  Waveform& then(double duration, const ControlField& end, Shape shape = Shape::SineSquared,
                 Shape dc_shape = Shape::Linear, std::string tag = "") {
    if (segments_.empty()) throw WaveformError("then() needs an existing segment");
    append(Segment{duration, segments_.back().end, end, shape, dc_shape, std::move(tag)});
    return *this;
  }

  Waveform& append(const Waveform& other) {
    for (const auto& s : other.segments_) append(s);
    return *this;
  }

  const std::vector<Segment>& segments() const { return segments_; }
  bool empty() const { return segments_.empty(); }
  double total_duration() const { return total_; }
  double segment_start(std::size_t i) const { return starts_.at(i); }

  ControlField initial() const { return front().start; }
  ControlField final() const { return segments_.empty() ? ControlField{} : segments_.back().end; }

  std::size_t segment_index(double t) const {
    t = check_time(t);
    auto it = std::upper_bound(starts_.begin(), starts_.end(), t);
    std::size_t i = static_cast<std::size_t>(it - starts_.begin()) - 1;
    return std::min(i, segments_.size() - 1);
  }

  ControlField sample(double t) const {
    if (segments_.empty()) {
      if (t != 0.0) throw WaveformError("empty waveform only defines t = 0");
      return ControlField{};
    }
    t = check_time(t);
    const std::size_t i = segment_index(t);
    const Segment& s = segments_[i];
    if (t == total_ && i + 1 == segments_.size()) return s.end;
    return s.at((t - starts_[i]) / s.duration);
  }

  // Time-reversed schedule: segment order reversed, each segment traversed
  // backwards with its shape mirrored.
  Waveform reversed() const {
    Waveform w;
    for (auto it = segments_.rbegin(); it != segments_.rend(); ++it) {
      Segment s = *it;
      std::swap(s.start, s.end);
      s.shape = mirrored(s.shape);
      s.dc_shape = mirrored(s.dc_shape);
      w.append(std::move(s));
    }
    return w;
  }

  // Same schedule with every control transformed by fn.
  template <class F>
  Waveform map(F fn) const {
    Waveform w;
    for (Segment s : segments_) {
      s.start = fn(s.start);
      s.end = fn(s.end);
      w.append(std::move(s));
    }
    return w;
  }

 private:
  const Segment& front() const {
    if (segments_.empty()) throw WaveformError("waveform is empty");
    return segments_.front();
  }

  // Accepts a relative rounding slack of 1e-12 past the end (sums of segment
  // durations rarely land exactly on a decimal total) and clamps it.
  double check_time(double t) const {
    if (!(t >= 0.0 && t <= total_ * (1.0 + 1e-12)))
      throw WaveformError("time " + std::to_string(t) + " s outside waveform");
    return std::min(t, total_);
  }

  // linear, smoothstep and sine-squared are all point-symmetric about s = 1/2,
  // so a reversed traversal keeps the same shape
  static Shape mirrored(Shape s) { return s; }

  std::vector<Segment> segments_;
  std::vector<double> starts_;
  double total_ = 0.0;
};

// Coupling-off twin: radial fields and rotation shims removed; axial field,
// radial split shim and dc_scale kept.
inline ControlField strip_coupling(ControlField f) {
  f.e_field.y() = 0.0;
  f.e_field.z() = 0.0;
  f.rot_xy = f.rot_xz = f.rot_yz = 0.0;
  return f;
}

inline Waveform uncoupled(const Waveform& w) { return w.map(strip_coupling); }

// Adds a constant offset (stray fields or shims) to every control; dc_scale
// of the offset is ignored.
inline ControlField add_offset(ControlField f, const ControlField& off) {
  f.e_field += off.e_field;
  f.rot_xy += off.rot_xy;
  f.rot_xz += off.rot_xz;
  f.rot_yz += off.rot_yz;
  f.radial_split_shim += off.radial_split_shim;
  return f;
}

inline Waveform with_offset(const Waveform& w, const ControlField& off) {
  return w.map([&](const ControlField& f) { return add_offset(f, off); });
}

struct StandardPhrapParams {
  ControlField base;       // background controls held throughout (dc_scale ignored)
  ControlField coupling;   // peak coupling added at the crossing (dc_scale ignored)
  double dc_start = 1.0;
  double dc_cross = 0.0;   // dc_scale at the end of phase (i); 0 means the midpoint
  double dc_end = 1.0;
  double transfer_duration = 0.0;  // phases (i) + (ii), s
  double return_duration = 0.0;    // phase (iii), s
  Shape coupling_shape = Shape::SineSquared;
  Shape dc_shape = Shape::Linear;
  Shape return_dc_shape = Shape::Linear;
};

inline Waveform standard_phrap(const StandardPhrapParams& p, std::vector<std::string>* warnings = nullptr) {
  if (!(p.transfer_duration > 0.0) || !(p.return_duration > 0.0))
    throw WaveformError("phrap phase durations must be positive");
  if (warnings && p.return_duration >= p.transfer_duration)
    warnings->push_back("return duration is not shorter than the transfer; the return may undo the exchange");

  ControlField start = p.base, peak = add_offset(p.base, p.coupling), end = p.base;
  start.dc_scale = p.dc_start;
  peak.dc_scale = p.dc_cross != 0.0 ? p.dc_cross : 0.5 * (p.dc_start + p.dc_end);
  end.dc_scale = p.dc_end;

  Waveform w;
  w.append(Segment{0.5 * p.transfer_duration, start, peak, p.coupling_shape, p.dc_shape, "transfer"});
  w.then(0.5 * p.transfer_duration, end, p.coupling_shape, p.dc_shape, "transfer");
  w.then(p.return_duration, start, Shape::Linear, p.return_dc_shape, "return");
  return w;
}

}  // namespace phrap
