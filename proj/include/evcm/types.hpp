#pragma once
// Core domain types shared by all modules: events, slices, the camera model,
// dense grids, flow fields, depth maps, pose steps, and the error taxonomy.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include "evcm/memtrack.hpp"

namespace evcm {

// ---- error taxonomy --------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};
// File does not start with the expected format magic.
class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};
// File ends mid-header or mid-record.
class TruncatedFileError : public IoError {
 public:
  using IoError::IoError;
};
// Event timestamps decrease along the stream.
class UnsortedEventsError : public Error {
 public:
  using Error::Error;
};
// Pixel coordinate outside the sensor area.
class CoordinateRangeError : public Error {
 public:
  using Error::Error;
};
// Polarity outside {+1, -1}.
class InvalidPolarityError : public Error {
 public:
  using Error::Error;
};
// Event timestamp outside the slice window.
class TimeRangeError : public Error {
 public:
  using Error::Error;
};
// Grids that must agree in size do not.
class DimensionMismatchError : public Error {
 public:
  using Error::Error;
};
// An operation that needs at least one surviving event got none.
class EmptySliceError : public Error {
 public:
  using Error::Error;
};
// Invalid configuration or parameter value.
class ConfigError : public Error {
 public:
  using Error::Error;
};
// Optimization aborted because the loss exploded.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// ---- small vectors ---------------------------------------------------------

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend Vec2 operator*(Vec2 a, double s) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;

  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

// ---- events ----------------------------------------------------------------

struct Event {
  std::uint64_t t_us = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t p = 1;  // +1 or -1, never 0

  friend bool operator==(const Event&, const Event&) = default;
};

inline constexpr int kPolarities = 2;

// Index used for per-polarity accumulators: positive -> 0, negative -> 1.
inline constexpr int polarity_index(std::int8_t p) { return p > 0 ? 0 : 1; }

// A time-ordered batch of events plus its window and sensor geometry.
struct EventSlice {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint64_t t_start_us = 0;
  std::uint64_t t_end_us = 0;  // exclusive
  mem::TrackedVector<Event> events;

  friend bool operator==(const EventSlice&, const EventSlice&) = default;

  double duration_s() const {
    return (static_cast<double>(t_end_us) - static_cast<double>(t_start_us)) * 1e-6;
  }

  // Throws the matching error type on the first violated invariant.
  void validate() const {
    if (width == 0 || height == 0)
      throw DimensionMismatchError("event slice: width and height must be positive");
    if (t_end_us < t_start_us)
      throw TimeRangeError("event slice: t_end precedes t_start");
    std::uint64_t prev_t = 0;
    bool first = true;
    for (const Event& e : events) {
      if (e.x >= width || e.y >= height)
        throw CoordinateRangeError("event slice: coordinate (" + std::to_string(e.x) +
                                   "," + std::to_string(e.y) + ") outside " +
                                   std::to_string(width) + "x" + std::to_string(height));
      if (e.p != 1 && e.p != -1)
        throw InvalidPolarityError("event slice: polarity must be +1 or -1, got " +
                                   std::to_string(static_cast<int>(e.p)));
      if (!first && e.t_us < prev_t)
        throw UnsortedEventsError("event slice: timestamps must be non-decreasing");
      if (e.t_us < t_start_us || e.t_us >= t_end_us)
        throw TimeRangeError("event slice: timestamp " + std::to_string(e.t_us) +
                             " outside [" + std::to_string(t_start_us) + ", " +
                             std::to_string(t_end_us) + ")");
      prev_t = e.t_us;
      first = false;
    }
  }
};

// ---- camera ----------------------------------------------------------------

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;

  void validate(int width, int height) const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw ConfigError("intrinsics: focal lengths must be positive");
    if (!(cx > 0.0) || cx >= width || !(cy > 0.0) || cy >= height)
      throw ConfigError("intrinsics: principal point must lie inside the sensor");
  }
};

// ---- dense grids -----------------------------------------------------------

// Row-major H x W grid; (x, y) indexes column x of row y, origin top-left.
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width <= 0 || height <= 0)
      throw DimensionMismatchError("image: width and height must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }
  T& at(int x, int y) { return data_[idx(x, y)]; }
  const T& at(int x, int y) const { return data_[idx(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) {
    for (T& e : data_) e = v;
  }

  template <typename U>
  bool same_shape(const Image<U>& o) const {
    return width_ == o.width() && height_ == o.height();
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  mem::TrackedVector<T> data_;
};

// ---- flow ------------------------------------------------------------------

// Dense 2-channel flow over one time bin, in px/s.
struct FlowField {
  Image<double> u;  // x component
  Image<double> v;  // y component
  double bin_duration_s = 0.0;

  FlowField() = default;
  FlowField(int width, int height, double duration_s)
      : u(width, height, 0.0), v(width, height, 0.0), bin_duration_s(duration_s) {}

  int width() const { return u.width(); }
  int height() const { return u.height(); }

  friend bool operator==(const FlowField&, const FlowField&) = default;

  void validate() const {
    if (u.empty() || !u.same_shape(v))
      throw DimensionMismatchError("flow field: u and v must share a nonempty shape");
    if (!(bin_duration_s > 0.0))
      throw ConfigError("flow field: bin duration must be positive");
  }
};

// B contiguous flow bins with B+1 strictly increasing edge times.
struct FlowSequence {
  mem::TrackedVector<std::uint64_t> edges_us;  // size B+1
  std::vector<FlowField> fields;               // size B

  int n_bins() const { return static_cast<int>(fields.size()); }
  int width() const { return fields.empty() ? 0 : fields.front().width(); }
  int height() const { return fields.empty() ? 0 : fields.front().height(); }

  std::uint64_t t_start_us() const { return edges_us.front(); }
  std::uint64_t t_end_us() const { return edges_us.back(); }

  // Seconds since the window start; all warp arithmetic runs on this clock.
  double rel_s(std::uint64_t t_us) const {
    return (static_cast<double>(t_us) - static_cast<double>(edges_us.front())) * 1e-6;
  }
  double edge_rel_s(int i) const { return rel_s(edges_us[static_cast<std::size_t>(i)]); }

  void validate() const {
    if (fields.empty() || edges_us.size() != fields.size() + 1)
      throw ConfigError("flow sequence: need B >= 1 fields and B+1 edges");
    for (std::size_t i = 0; i + 1 < edges_us.size(); ++i)
      if (edges_us[i] >= edges_us[i + 1])
        throw ConfigError("flow sequence: edges must be strictly increasing");
    for (const FlowField& f : fields) {
      f.validate();
      if (!f.u.same_shape(fields.front().u))
        throw DimensionMismatchError("flow sequence: all fields must share one shape");
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const double d = (static_cast<double>(edges_us[i + 1]) -
                        static_cast<double>(edges_us[i])) * 1e-6;
      if (std::abs(fields[i].bin_duration_s - d) > 1e-9 * (1.0 + d))
        throw ConfigError("flow sequence: field duration disagrees with bin edges");
    }
  }

  // All-zero flow over evenly spaced bins covering [t_start, t_end).
  static FlowSequence zeros(int width, int height, std::uint64_t t_start_us,
                            std::uint64_t t_end_us, int n_bins) {
    if (n_bins < 1 || t_end_us <= t_start_us)
      throw ConfigError("flow sequence: need n_bins >= 1 and a nonempty window");
    FlowSequence seq;
    seq.edges_us.resize(static_cast<std::size_t>(n_bins) + 1);
    const double span = static_cast<double>(t_end_us - t_start_us);
    for (int i = 0; i <= n_bins; ++i) {
      seq.edges_us[static_cast<std::size_t>(i)] =
          (i == n_bins) ? t_end_us
                        : t_start_us + static_cast<std::uint64_t>(
                              std::llround(span * i / n_bins));
    }
    seq.fields.reserve(static_cast<std::size_t>(n_bins));
    for (int i = 0; i < n_bins; ++i) {
      const double d = (static_cast<double>(seq.edges_us[static_cast<std::size_t>(i) + 1]) -
                        static_cast<double>(seq.edges_us[static_cast<std::size_t>(i)])) * 1e-6;
      seq.fields.emplace_back(width, height, d);
    }
    return seq;
  }

  // Same bin layout as *this, all flow values zeroed.
  FlowSequence zeros_like() const {
    FlowSequence seq;
    seq.edges_us = edges_us;
    seq.fields.reserve(fields.size());
    for (const FlowField& f : fields)
      seq.fields.emplace_back(f.width(), f.height(), f.bin_duration_s);
    return seq;
  }
};

// ---- depth and pose --------------------------------------------------------

// Dense positive depth, up to scale. An empty mask means every pixel is valid.
struct DepthMap {
  Image<double> d;
  Image<std::uint8_t> valid;  // nonzero = valid; empty = all valid

  DepthMap() = default;
  explicit DepthMap(Image<double> depth) : d(std::move(depth)) {}
  DepthMap(Image<double> depth, Image<std::uint8_t> mask)
      : d(std::move(depth)), valid(std::move(mask)) {
    if (!valid.empty() && !d.same_shape(valid))
      throw DimensionMismatchError("depth map: mask shape must match depth shape");
  }

  int width() const { return d.width(); }
  int height() const { return d.height(); }
  bool has_mask() const { return !valid.empty(); }
  bool is_valid(int x, int y) const { return !has_mask() || valid.at(x, y) != 0; }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;

  void validate() const {
    if (d.empty()) throw DimensionMismatchError("depth map: empty grid");
    if (!valid.empty() && !d.same_shape(valid))
      throw DimensionMismatchError("depth map: mask shape must match depth shape");
    for (int y = 0; y < d.height(); ++y)
      for (int x = 0; x < d.width(); ++x)
        if (is_valid(x, y) && !(d.at(x, y) > 0.0 && std::isfinite(d.at(x, y))))
          throw ConfigError("depth map: valid depths must be positive and finite");
  }
};

// Rigid motion over one bin: rotation in exponential coordinates plus
// translation in the same scale family as depth.
struct PoseStep {
  Vec3 omega;  // radians
  Vec3 trans;

  friend bool operator==(const PoseStep&, const PoseStep&) = default;

  void validate() const {
    const double pi = 3.14159265358979323846;
    if (!(omega.norm() < pi))
      throw ConfigError("pose step: rotation angle must stay below pi");
    for (double c : {omega.x, omega.y, omega.z, trans.x, trans.y, trans.z})
      if (!std::isfinite(c)) throw ConfigError("pose step: non-finite component");
  }
};

}  // namespace evcm
