#pragma once
// Synthetic ground truth: fronto-parallel textured depth planes observed under
// a known per-bin camera motion. Each plane scatters point features that emit
// events along their projected pixel tracks; the exact depth map and per-bin
// flow fields come out alongside, so recovery code can be scored against the
// truth that produced its input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "evcm/geometry.hpp"
#include "evcm/types.hpp"
#include "evcm/warp.hpp"

namespace evcm {

// One constant-depth plane covering the half-open pixel region
// [x0, x1) x [y0, y1), textured with features at the given density.
struct PlaneSpec {
  double depth = 1.0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double feature_density = 0.05;  // expected features per px^2
};

struct SceneSpec {
  int width = 64;
  int height = 48;
  std::vector<PlaneSpec> planes;
  std::vector<PoseStep> trajectory;  // one motion step per flow bin
  CameraIntrinsics k{60.0, 60.0, 31.5, 23.5};
  double event_rate = 2000.0;  // events per second per feature
  double duration_s = 0.1;
  std::uint64_t seed = 1;

  int n_bins() const { return static_cast<int>(trajectory.size()); }

  void validate() const {
    if (width < 2 || height < 2)
      throw ConfigError("scene: sensor must be at least 2x2");
    if (planes.empty()) throw ConfigError("scene: need at least one plane");
    if (trajectory.empty()) throw ConfigError("scene: need one pose per bin");
    if (!(duration_s > 0.0)) throw ConfigError("scene: duration must be positive");
    if (!(event_rate > 0.0)) throw ConfigError("scene: event rate must be positive");
    k.validate(width, height);
    for (const PlaneSpec& p : planes) {
      if (!(p.depth > 0.0) || !std::isfinite(p.depth))
        throw ConfigError("scene: plane depth must be positive and finite");
      if (!(p.feature_density > 0.0))
        throw ConfigError("scene: feature density must be positive");
      if (p.x0 < 0 || p.y0 < 0 || p.x1 > width || p.y1 > height || p.x0 >= p.x1 ||
          p.y0 >= p.y1)
        throw ConfigError("scene: plane region must be nonempty and inside the frame");
    }
    for (std::size_t i = 0; i < planes.size(); ++i)
      for (std::size_t j = i + 1; j < planes.size(); ++j) {
        const PlaneSpec& a = planes[i];
        const PlaneSpec& b = planes[j];
        if (std::max(a.x0, b.x0) < std::min(a.x1, b.x1) &&
            std::max(a.y0, b.y0) < std::min(a.y1, b.y1))
          throw ConfigError("scene: plane regions must be disjoint");
      }
    for (const PoseStep& p : trajectory) p.validate();
  }
};

struct SceneData {
  EventSlice events;
  DepthMap depth;      // truth; masked invalid outside all plane regions
  FlowSequence flow;   // truth, from the depth and the trajectory
  std::vector<Image<std::uint8_t>> flow_valid;
  int n_features = 0;  // features scattered (emitting or not)
};

// Scatters features over each plane, advances them with the ground-truth flow
// (the same per-bin stepping the warp uses), and emits events of alternating
// polarity at jittered times along each track. A feature stops for good once
// its track leaves [0, W-1] x [0, H-1].
inline SceneData generate_scene(const SceneSpec& spec) {
  spec.validate();
  const int w = spec.width;
  const int h = spec.height;
  const std::uint64_t t_end_us =
      static_cast<std::uint64_t>(std::llround(spec.duration_s * 1e6));

  Image<double> depth_img(w, h, 0.0);
  Image<std::uint8_t> depth_mask(w, h, 0);
  for (const PlaneSpec& p : spec.planes)
    for (int y = p.y0; y < p.y1; ++y)
      for (int x = p.x0; x < p.x1; ++x) {
        depth_img.at(x, y) = p.depth;
        depth_mask.at(x, y) = 1;
      }

  SceneData out;
  out.depth = DepthMap(std::move(depth_img), std::move(depth_mask));
  GeometryFlows gf =
      depth_pose_to_flows(out.depth, spec.trajectory, spec.k, 0, t_end_us);
  out.flow = std::move(gf.flows);
  out.flow_valid = std::move(gf.valid);

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double gap_s = 1.0 / spec.event_rate;
  mem::TrackedVector<Event> events;
  for (const PlaneSpec& p : spec.planes) {
    const double area = static_cast<double>(p.x1 - p.x0) *
                        static_cast<double>(p.y1 - p.y0);
    const long n = std::llround(p.feature_density * area);
    std::uniform_real_distribution<double> ux(p.x0, p.x1), uy(p.y0, p.y1);
    for (long f = 0; f < n; ++f) {
      const Vec2 start{ux(rng), uy(rng)};
      ++out.n_features;
      std::int8_t pol = 1;
      for (long e = 0;; ++e) {
        const double t = (static_cast<double>(e) + u01(rng)) * gap_s;
        if (t >= spec.duration_s) break;
        const Vec2 pos = warp_event(start, 0.0, t, out.flow);
        if (!in_bounds(pos, w, h)) break;
        const std::uint64_t t_us = static_cast<std::uint64_t>(t * 1e6);
        if (t_us >= t_end_us) break;
        events.push_back(Event{t_us, static_cast<std::uint16_t>(std::lround(pos.x)),
                               static_cast<std::uint16_t>(std::lround(pos.y)), pol});
        pol = static_cast<std::int8_t>(-pol);
      }
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  out.events = EventSlice{static_cast<std::uint16_t>(w), static_cast<std::uint16_t>(h),
                          0, t_end_us, std::move(events)};
  return out;
}

}  // namespace evcm
