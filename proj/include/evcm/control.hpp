#pragma once

// Reactive yaw control from depth: the image is sliced into K vertical bins,
// each reduced to an average inverse depth, and a yaw-rate command is formed
// from a depth-seeking goal term plus a Gaussian-weighted avoidance term.
// A headless 2D simulator closes the loop over occupancy-grid scenes with a
// ray-cast depth sensor and pilot-style interventions, for studying avoidance
// behavior without hardware.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evcm/io.hpp"
#include "evcm/types.hpp"

namespace evcm {

// ---- yaw-rate controller ----------------------------------------------------

struct ControllerParams {
  int bins = 8;               // K vertical slices
  double lambda_goal = 0.2;   // gain on the depth-seeking term
  double lambda_avoid = 1.0;  // gain on the avoidance term
  double alpha = 0.5;         // inverse-depth attenuation constant
  double sigma = 12.0;        // Gaussian width of the avoidance kernel, in bins

  // Center bin index; for even K it falls between the two middle bins.
  double center() const { return (static_cast<double>(bins) - 1.0) / 2.0; }

  void validate() const {
    if (bins < 2) throw ConfigError("controller: need at least 2 bins");
    if (!(lambda_goal >= 0.0) || !std::isfinite(lambda_goal) ||
        !(lambda_avoid >= 0.0) || !std::isfinite(lambda_avoid))
      throw ConfigError("controller: gains must be non-negative and finite");
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
      throw ConfigError("controller: alpha must be non-negative and finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw ConfigError("controller: sigma must be positive and finite");
  }
};

// Average inverse depth per vertical slice, left to right. A slice with no
// valid depth pixels reads 0 (infinitely far) and raises the warning flag.
struct DisparityBins {
  std::vector<double> d;
  bool has_empty_slice = false;
};

// Splits the depth map into `bins` equal-width vertical slices (left to
// right; remainder columns join the last slice) and averages 1/depth over the
// valid pixels of each.
inline DisparityBins bin_depth(const DepthMap& depth, int bins) {
  if (bins < 1) throw ConfigError("depth binning: need at least one bin");
  depth.validate();
  const int w = depth.width();
  if (w < bins)
    throw ConfigError("depth binning: image width " + std::to_string(w) +
                      " is smaller than the bin count " + std::to_string(bins));

  DisparityBins out;
  out.d.assign(static_cast<std::size_t>(bins), 0.0);
  const int slice_w = w / bins;
  for (int k = 0; k < bins; ++k) {
    const int x0 = k * slice_w;
    const int x1 = k + 1 == bins ? w : x0 + slice_w;
    double acc = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < depth.height(); ++y)
      for (int x = x0; x < x1; ++x) {
        if (!depth.is_valid(x, y)) continue;
        acc += 1.0 / depth.d.at(x, y);
        ++n;
      }
    if (n == 0)
      out.has_empty_slice = true;
    else
      out.d[static_cast<std::size_t>(k)] = acc / static_cast<double>(n);
  }
  return out;
}

namespace detail {

// e^(-alpha/d) for d > 0; an empty bin (d = 0, infinitely far) contributes
// nothing, taking the d -> 0+ limit.
inline double avoid_attenuation(double d, double alpha) {
  return d > 0.0 ? std::exp(-alpha / d) : 0.0;
}

}  // namespace detail

// Yaw-rate command in rad/s, yawing right positive. The goal term steers
// toward the farthest slice (smallest average inverse depth, ties broken
// toward the lowest index); the avoidance term sums (center - k) weighted by
// depth attenuation and a Gaussian falloff from the center. The avoidance sum
// is evaluated over mirror pairs so that it is exactly zero for left-right
// symmetric input and exactly negated when the input is reversed.
inline double yaw_rate(const DisparityBins& bins, const ControllerParams& params) {
  params.validate();
  const int k_count = params.bins;
  if (bins.d.size() != static_cast<std::size_t>(k_count))
    throw DimensionMismatchError("yaw rate: expected " + std::to_string(k_count) +
                                 " bins, got " + std::to_string(bins.d.size()));
  for (double d : bins.d)
    if (!(d >= 0.0) || !std::isfinite(d))
      throw ConfigError("yaw rate: inverse depths must be non-negative and finite");

  const double kbar = params.center();
  const auto argmin =
      std::min_element(bins.d.begin(), bins.d.end()) - bins.d.begin();
  const double goal = params.lambda_goal * (static_cast<double>(argmin) - kbar);

  double avoid = 0.0;
  for (int k = 0; 2 * k + 1 < k_count; ++k) {
    const int m = k_count - 1 - k;  // mirror index; (m - kbar)^2 == (k - kbar)^2
    const double off = static_cast<double>(k) - kbar;
    const double gauss = std::exp(-(off * off) / (2.0 * params.sigma * params.sigma));
    avoid += (kbar - static_cast<double>(k)) * gauss *
             (detail::avoid_attenuation(bins.d[static_cast<std::size_t>(k)], params.alpha) -
              detail::avoid_attenuation(bins.d[static_cast<std::size_t>(m)], params.alpha));
  }
  avoid *= params.lambda_avoid;

  return goal + avoid;
}

// ---- occupancy scenes ---------------------------------------------------------

// 2D occupancy grid in image coordinates: x right, y down, cell (0,0) covering
// the square [0, cell_m) x [0, cell_m) in meters. Nonzero = obstacle.
struct OccupancyGrid {
  Image<std::uint8_t> occupied;
  double cell_m = 0.1;  // meters per cell edge

  void validate() const {
    if (occupied.empty()) throw DimensionMismatchError("occupancy grid: empty map");
    if (!(cell_m > 0.0) || !std::isfinite(cell_m))
      throw ConfigError("occupancy grid: cell size must be positive");
  }

  // Positions outside the map are free space.
  bool blocked_at(double x_m, double y_m) const {
    const int cx = static_cast<int>(std::floor(x_m / cell_m));
    const int cy = static_cast<int>(std::floor(y_m / cell_m));
    if (cx < 0 || cy < 0 || cx >= occupied.width() || cy >= occupied.height())
      return false;
    return occupied.at(cx, cy) != 0;
  }
};

// PGM pixels darker than 128 are obstacles (black walls on white free space).
inline OccupancyGrid occupancy_from_pgm(const std::filesystem::path& path,
                                        double cell_m) {
  const Image<std::uint8_t> img = read_pgm(path);
  OccupancyGrid grid;
  grid.cell_m = cell_m;
  grid.occupied = Image<std::uint8_t>(img.width(), img.height(), 0);
  for (std::size_t i = 0; i < img.size(); ++i)
    grid.occupied[i] = img[i] < 128 ? 1 : 0;
  grid.validate();
  return grid;
}

// Inverse of occupancy_from_pgm's convention: obstacles black, free white.
inline Image<std::uint8_t> occupancy_to_pgm_image(const OccupancyGrid& grid) {
  Image<std::uint8_t> img(grid.occupied.width(), grid.occupied.height(), 255);
  for (std::size_t i = 0; i < img.size(); ++i)
    if (grid.occupied[i] != 0) img[i] = 0;
  return img;
}

// ---- closed-loop navigation simulation ---------------------------------------

struct NavConfig {
  ControllerParams controller{};
  double speed_mps = 0.5;   // constant forward speed
  double dt_s = 0.05;       // control period
  int steps = 1200;

  double start_x_m = 0.0;
  double start_y_m = 0.0;
  double start_psi_rad = 0.0;
  double heading_jitter_rad = 0.0;  // seed-driven uniform jitter on the start heading

  // A pilot intervention triggers below the first distance and re-arms above
  // the second (hysteresis so one close pass counts once).
  double intervene_below_m = 0.3;
  double rearm_above_m = 0.35;
  double max_yaw_rate_rad_s = std::numbers::pi;

  // Ray-cast depth sensor.
  int depth_columns = 64;
  double fov_rad = 0.5 * std::numbers::pi;
  double max_range_m = 8.0;
  double depth_scale_noise = 0.0;  // s: each return scaled by U(1-s, 1+s)

  std::uint64_t seed = 1;

  void validate() const {
    controller.validate();
    if (!(speed_mps > 0.0) || !std::isfinite(speed_mps))
      throw ConfigError("navsim: speed must be positive");
    if (!(dt_s > 0.0) || !std::isfinite(dt_s))
      throw ConfigError("navsim: control period must be positive");
    if (steps < 1) throw ConfigError("navsim: need at least one step");
    if (!(heading_jitter_rad >= 0.0) || !std::isfinite(heading_jitter_rad))
      throw ConfigError("navsim: heading jitter must be non-negative");
    if (!(intervene_below_m > 0.0) || !(rearm_above_m >= intervene_below_m))
      throw ConfigError("navsim: need 0 < intervention distance <= re-arm distance");
    if (!(max_yaw_rate_rad_s > 0.0))
      throw ConfigError("navsim: yaw-rate limit must be positive");
    if (depth_columns < controller.bins)
      throw ConfigError("navsim: need at least one depth column per controller bin");
    if (!(fov_rad > 0.0) || fov_rad > 2.0 * std::numbers::pi)
      throw ConfigError("navsim: field of view must be in (0, 2*pi]");
    if (!(max_range_m > 0.0) || !std::isfinite(max_range_m))
      throw ConfigError("navsim: sensor range must be positive");
    if (!(depth_scale_noise >= 0.0) || depth_scale_noise >= 1.0)
      throw ConfigError("navsim: depth noise scale must be in [0, 1)");
  }
};

struct NavStep {
  double t_s = 0.0;
  double x_m = 0.0;
  double y_m = 0.0;
  double psi_rad = 0.0;
  bool intervention = false;
};

struct NavResult {
  std::vector<NavStep> trajectory;
  int interventions = 0;
  double distance_m = 0.0;                  // total path length
  std::vector<double> segment_lengths_m;    // distances between interventions
  bool saw_empty_view = false;              // some step sensed nothing at all

  // n interventions split the path into n+1 autonomous segments.
  double mean_distance_between_interventions() const {
    return distance_m / (static_cast<double>(interventions) + 1.0);
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("navsim: cannot open " + path.string());
    out << "t,x,y,psi,intervention\n";
    for (const NavStep& s : trajectory)
      out << format_number(s.t_s) << ',' << format_number(s.x_m) << ','
          << format_number(s.y_m) << ',' << format_number(s.psi_rad) << ','
          << (s.intervention ? 1 : 0) << '\n';
    if (!out) throw IoError("navsim: failed writing " + path.string());
  }
};

namespace detail {

// Perspective depth image (1 row) ray-cast from the pose: column 0 looks
// farthest left, rays march in quarter-cell steps to the first obstacle, and
// depth is the forward component (range times the cosine of the bearing
// offset). Columns with no return within range stay invalid.
inline DepthMap raycast_depth(const OccupancyGrid& grid, double x, double y,
                              double psi, const NavConfig& cfg) {
  Image<double> d(cfg.depth_columns, 1, 1.0);
  Image<std::uint8_t> valid(cfg.depth_columns, 1, 0);
  const double march = 0.25 * grid.cell_m;
  for (int j = 0; j < cfg.depth_columns; ++j) {
    const double off =
        cfg.fov_rad * ((static_cast<double>(j) + 0.5) / cfg.depth_columns - 0.5);
    const double theta = psi + off;
    const double cx = std::cos(theta), cy = std::sin(theta);
    for (double s = march; s <= cfg.max_range_m; s += march) {
      if (grid.blocked_at(x + s * cx, y + s * cy)) {
        const double depth = s * std::cos(off);
        if (depth > 0.0) {
          d.at(j, 0) = depth;
          valid.at(j, 0) = 1;
        }
        break;
      }
    }
  }
  return DepthMap(std::move(d), std::move(valid));
}

// Squared distance from a point to the center of the nearest obstacle cell.
// Returns false when the map has no obstacles.
inline bool nearest_obstacle(const std::vector<std::pair<double, double>>& centers,
                             double x, double y, double& ox, double& oy,
                             double& dist) {
  if (centers.empty()) return false;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [px, py] : centers) {
    const double dx = x - px, dy = y - py;
    const double sq = dx * dx + dy * dy;
    if (sq < best) {
      best = sq;
      ox = px;
      oy = py;
    }
  }
  dist = std::sqrt(best);
  return true;
}

}  // namespace detail

// Closed-loop run: a kinematic unicycle at constant forward speed senses
// depth by ray-casting, bins it, and applies the yaw-rate command (clamped to
// the configured limit). Coordinates follow the grid image convention
// (x right, y down), in which a positive yaw rate turns the vehicle right.
// When the vehicle comes within the intervention distance of an obstacle, an
// intervention is logged and its heading is reset to point away from the
// nearest obstacle, emulating a safety pilot; a fresh intervention can only
// trigger after the distance has recovered past the re-arm threshold. A view
// with no returns at all carries no information, so the yaw command is held
// at zero for that step.
inline NavResult navsim(const OccupancyGrid& grid, const NavConfig& cfg) {
  cfg.validate();
  grid.validate();
  if (grid.blocked_at(cfg.start_x_m, cfg.start_y_m))
    throw ConfigError("navsim: start position is inside an obstacle");

  std::vector<std::pair<double, double>> centers;
  for (int y = 0; y < grid.occupied.height(); ++y)
    for (int x = 0; x < grid.occupied.width(); ++x)
      if (grid.occupied.at(x, y) != 0)
        centers.emplace_back((x + 0.5) * grid.cell_m, (y + 0.5) * grid.cell_m);

  std::mt19937_64 rng_start(cfg.seed);
  std::mt19937_64 rng_noise(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  double x = cfg.start_x_m, y = cfg.start_y_m;
  double psi = cfg.start_psi_rad;
  if (cfg.heading_jitter_rad > 0.0) psi += cfg.heading_jitter_rad * unit(rng_start);

  NavResult result;
  result.trajectory.reserve(static_cast<std::size_t>(cfg.steps));
  bool armed = true;
  double segment = 0.0;
  std::uniform_real_distribution<double> noise(1.0 - cfg.depth_scale_noise,
                                               1.0 + cfg.depth_scale_noise);

  for (int step = 0; step < cfg.steps; ++step) {
    DepthMap depth = detail::raycast_depth(grid, x, y, psi, cfg);
    bool any_valid = false;
    for (std::size_t i = 0; i < depth.valid.size(); ++i)
      if (depth.valid[i] != 0) {
        if (cfg.depth_scale_noise > 0.0) depth.d[i] *= noise(rng_noise);
        any_valid = true;
      }

    double yaw = 0.0;
    if (any_valid) {
      const DisparityBins bins = bin_depth(depth, cfg.controller.bins);
      yaw = std::clamp(yaw_rate(bins, cfg.controller), -cfg.max_yaw_rate_rad_s,
                       cfg.max_yaw_rate_rad_s);
    } else {
      result.saw_empty_view = true;
    }

    psi += yaw * cfg.dt_s;
    x += cfg.speed_mps * std::cos(psi) * cfg.dt_s;
    y += cfg.speed_mps * std::sin(psi) * cfg.dt_s;
    const double moved = cfg.speed_mps * cfg.dt_s;
    result.distance_m += moved;
    segment += moved;

    bool intervened = false;
    double ox = 0.0, oy = 0.0, dist = 0.0;
    if (detail::nearest_obstacle(centers, x, y, ox, oy, dist)) {
      if (armed && dist < cfg.intervene_below_m) {
        intervened = true;
        armed = false;
        ++result.interventions;
        result.segment_lengths_m.push_back(segment);
        segment = 0.0;
        psi = std::atan2(y - oy, x - ox);  // pilot points the vehicle away
      } else if (!armed && dist >= cfg.rearm_above_m) {
        armed = true;
      }
    }

    result.trajectory.push_back(NavStep{(static_cast<double>(step) + 1.0) * cfg.dt_s,
                                        x, y, psi, intervened});
  }
  result.segment_lengths_m.push_back(segment);
  return result;
}

}  // namespace evcm
