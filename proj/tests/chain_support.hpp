// Composed-chain finite-difference support: builds random predictor->flow->loss
// instances whose losses are smooth around the operating point, and measures
// the max-norm relative disagreement between the analytic parameter gradients
// and central finite differences. Shared by the unit tests and the
// acceptance gate.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "evcm/engine.hpp"
#include "evcm/geometry.hpp"
#include "evcm/predictor.hpp"
#include "evcm/warp.hpp"
#include "fd_support.hpp"

namespace evcm_test {

using evcm::CameraIntrinsics;
using evcm::DecodedPredictor;
using evcm::DepthMap;
using evcm::DirectPredictor;
using evcm::Event;
using evcm::EventSlice;
using evcm::GeometryFlows;
using evcm::GradientBuffer;
using evcm::Image;
using evcm::Mat3;
using evcm::PoseGrad;
using evcm::PoseStep;
using evcm::PredictorGrads;
using evcm::Reprojection;
using evcm::Vec2;

struct ChainInstance {
  DirectPredictor pred;
  CameraIntrinsics k;
  EventSlice slice;
};

// Margin screen for the depth-consistency leg: finite differences only see a
// smooth function if no projected pixel sits near a bilinear kink (integer
// crossing), a nearest-cell flip (half-integer), the view boundary, a z-buffer
// ordering tie, or the |a-b| sign change of the normalized difference.
inline bool geo_margins_ok(const DepthMap& d, const PoseStep& pose, const CameraIntrinsics& k,
                    double ab_margin, int min_valid) {
  const int w = d.width(), h = d.height();
  const Mat3 rot = evcm::rodrigues(pose.omega);
  const double inf = std::numeric_limits<double>::infinity();
  Image<double> zbest(w, h, inf), zsecond(w, h, inf);
  struct Landing {
    Vec2 pixel;
    double z = 0.0;
    int nx = 0, ny = 0;
    bool in_view = false;
  };
  std::vector<Landing> landings(d.d.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Reprojection rp = evcm::reproject(
          {static_cast<double>(x), static_cast<double>(y)}, d.d.at(x, y), rot,
          pose.trans, k);
      if (std::abs(rp.z) < 0.2) return false;  // validity must not flip
      if (!rp.valid) continue;
      const double border = std::min(std::min(rp.pixel.x, w - 1 - rp.pixel.x),
                                     std::min(rp.pixel.y, h - 1 - rp.pixel.y));
      if (std::abs(border) < 0.02) return false;
      if (border < 0.0) continue;  // cleanly out of view
      const double fx = rp.pixel.x - std::floor(rp.pixel.x);
      const double fy = rp.pixel.y - std::floor(rp.pixel.y);
      if (std::abs(fx - 0.5) < 5e-3 || std::abs(fy - 0.5) < 5e-3) return false;
      Landing& l = landings[d.d.idx(x, y)];
      l.pixel = rp.pixel;
      l.z = rp.z;
      l.nx = static_cast<int>(std::lround(rp.pixel.x));
      l.ny = static_cast<int>(std::lround(rp.pixel.y));
      l.in_view = true;
      double& best = zbest.at(l.nx, l.ny);
      double& second = zsecond.at(l.nx, l.ny);
      if (rp.z < best) {
        second = best;
        best = rp.z;
      } else {
        second = std::min(second, rp.z);
      }
    }
  }
  for (std::size_t i = 0; i < zbest.size(); ++i)
    if (std::isfinite(zsecond[i]) && zsecond[i] - zbest[i] < 0.01) return false;
  int n_valid = 0;
  for (const Landing& l : landings) {
    if (!l.in_view || l.z != zbest.at(l.nx, l.ny)) continue;  // occluded
    const double fx = l.pixel.x - std::floor(l.pixel.x);
    const double fy = l.pixel.y - std::floor(l.pixel.y);
    if (fx < 5e-3 || fx > 1.0 - 5e-3 || fy < 5e-3 || fy > 1.0 - 5e-3) return false;
    double b;
    Vec2 db;
    if (!evcm::detail::sample_target_depth(d, l.pixel, &b, &db)) continue;
    if (std::abs(l.z - b) < ab_margin) return false;
    ++n_valid;
  }
  return n_valid >= min_valid;
}

struct ChainParams {
  int sensor_w = 16, sensor_h = 12;
  int factor = 4;
  int n_bins = 2;
  int n_events = 24;
  bool check_cm = true;   // events present, warp-leg margins enforced
  bool check_geo = false; // depth-consistency-leg margins enforced
};

inline ChainInstance make_chain_instance(std::uint64_t seed, const ChainParams& cp) {
  const std::uint64_t window_us = 100000;
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt > 50000)
      throw std::runtime_error("make_chain_instance: rejection sampling stalled");
    std::mt19937_64 rng(seed * 2000003ull + attempt);
    ChainInstance inst;
    const int lw = cp.sensor_w / cp.factor, lh = cp.sensor_h / cp.factor;
    inst.pred.upsample = cp.factor;
    // A gentle depth ramp plus noise keeps the projected-vs-interpolated
    // depth difference away from zero almost everywhere.
    inst.pred.depth_params = Image<double>(lw, lh, 0.0);
    std::uniform_real_distribution<double> noise(-0.15, 0.15);
    for (int y = 0; y < lh; ++y)
      for (int x = 0; x < lw; ++x)
        inst.pred.depth_params.at(x, y) = 0.1 + 0.22 * x + 0.11 * y + noise(rng);
    std::uniform_real_distribution<double> om(-0.004, 0.004), lat(-0.02, 0.02),
        fwd(-0.008, 0.008), jit(-0.3, 0.3);
    for (int b = 0; b < cp.n_bins; ++b)
      inst.pred.poses.push_back(PoseStep{{om(rng), om(rng), om(rng)},
                                         {lat(rng), lat(rng), fwd(rng)}});
    inst.k = CameraIntrinsics{1.6 * cp.sensor_w, 1.6 * cp.sensor_w,
                              (cp.sensor_w - 1) / 2.0 + jit(rng),
                              (cp.sensor_h - 1) / 2.0 + jit(rng)};
    inst.slice.width = static_cast<std::uint16_t>(cp.sensor_w);
    inst.slice.height = static_cast<std::uint16_t>(cp.sensor_h);
    inst.slice.t_start_us = 0;
    inst.slice.t_end_us = window_us;
    if (cp.check_cm) {
      std::vector<std::uint64_t> ts(static_cast<std::size_t>(cp.n_events));
      std::uniform_int_distribution<std::uint64_t> td(1, window_us - 1);
      for (auto& t : ts) t = td(rng);
      std::sort(ts.begin(), ts.end());
      std::uniform_int_distribution<int> xs(1, cp.sensor_w - 2),
          ys(1, cp.sensor_h - 2), pol(0, 1);
      for (int e = 0; e < cp.n_events; ++e)
        inst.slice.events.push_back(Event{ts[static_cast<std::size_t>(e)],
                                          static_cast<std::uint16_t>(xs(rng)),
                                          static_cast<std::uint16_t>(ys(rng)),
                                          pol(rng) ? std::int8_t{1} : std::int8_t{-1}});
    }

    const DecodedPredictor dec = evcm::decode(inst.pred);
    const GeometryFlows geo = evcm::depth_pose_to_flows(dec.depth, dec.poses, inst.k,
                                                        0, window_us);
    bool ok = true;
    if (cp.check_cm) {
      evcm_test::FdInstance fd;
      fd.slice = inst.slice;
      fd.flows = geo.flows;
      evcm_test::FdInstanceParams mp;
      mp.lattice_margin = 1e-3;
      mp.border_margin = 0.02;
      ok = evcm_test::instance_margins_ok(fd, mp, &fd.n_masked);
    }
    if (ok && cp.check_geo) {
      const int min_valid = cp.sensor_w * cp.sensor_h / 5;
      for (const PoseStep& p : dec.poses)
        if (!geo_margins_ok(dec.depth, p, inst.k, 2e-3, min_valid)) {
          ok = false;
          break;
        }
    }
    if (ok) return inst;
  }
}

inline double chain_loss(const ChainInstance& inst, bool include_cm, double lambda) {
  const DecodedPredictor dec = evcm::decode(inst.pred);
  double total = 0.0;
  if (include_cm) {
    const GeometryFlows geo = evcm::depth_pose_to_flows(
        dec.depth, dec.poses, inst.k, inst.slice.t_start_us, inst.slice.t_end_us);
    total += evcm::build_iwe_stack(inst.slice, geo.flows).loss.value;
  }
  if (lambda > 0.0) {
    double geo_sum = 0.0;
    for (const PoseStep& p : dec.poses)
      geo_sum += evcm::geometry_consistency_loss(dec.depth, dec.depth, p, inst.k).value;
    total += lambda * geo_sum / static_cast<double>(dec.poses.size());
  }
  return total;
}

inline PredictorGrads chain_grads(const ChainInstance& inst, bool include_cm, double lambda) {
  const DecodedPredictor dec = evcm::decode(inst.pred);
  const GeometryFlows geo = evcm::depth_pose_to_flows(
      dec.depth, dec.poses, inst.k, inst.slice.t_start_us, inst.slice.t_end_us);
  GradientBuffer flow_grads(geo.flows.width(), geo.flows.height(), geo.flows.n_bins());
  if (include_cm) flow_grads = evcm::contrast_loss_backward(inst.slice, geo.flows);
  Image<double> extra_depth(dec.depth.width(), dec.depth.height(), 0.0);
  std::vector<PoseGrad> extra_poses(dec.poses.size());
  if (lambda > 0.0) {
    const double upstream = lambda / static_cast<double>(dec.poses.size());
    for (std::size_t i = 0; i < dec.poses.size(); ++i) {
      const evcm::GeoLossGrad g = evcm::geometry_consistency_loss_backward(
          dec.depth, dec.depth, dec.poses[i], inst.k, upstream);
      // Source and target view are the same decoded depth, so both gradient
      // halves land on it.
      for (std::size_t j = 0; j < extra_depth.size(); ++j)
        extra_depth[j] += g.d_d0[j] + g.d_d1[j];
      extra_poses[i].omega = g.d_omega;
      extra_poses[i].trans = g.d_trans;
    }
  }
  return evcm::accumulate_gradients(inst.pred, dec.depth, inst.k, geo.flows,
                                    flow_grads, lambda > 0.0 ? &extra_depth : nullptr,
                                    lambda > 0.0 ? &extra_poses : nullptr);
}

// Max-norm relative disagreement between analytic parameter gradients and
// central finite differences over every parameter.
inline double fd_max_rel_err(ChainInstance inst, bool include_cm, double lambda,
                      double h_depth = 1e-5, double h_pose = 1e-6) {
  const PredictorGrads pg = chain_grads(inst, include_cm, lambda);
  double max_diff = 0.0, norm_a = 0.0, norm_f = 0.0;
  const auto probe = [&](double* slot, double h, double analytic) {
    const double saved = *slot;
    *slot = saved + h;
    const double lp = chain_loss(inst, include_cm, lambda);
    *slot = saved - h;
    const double lm = chain_loss(inst, include_cm, lambda);
    *slot = saved;
    const double fd = (lp - lm) / (2.0 * h);
    max_diff = std::max(max_diff, std::abs(analytic - fd));
    norm_a = std::max(norm_a, std::abs(analytic));
    norm_f = std::max(norm_f, std::abs(fd));
  };
  for (std::size_t i = 0; i < inst.pred.depth_params.size(); ++i)
    probe(&inst.pred.depth_params[i], h_depth, pg.d_depth_params[i]);
  for (std::size_t b = 0; b < inst.pred.poses.size(); ++b) {
    PoseStep& p = inst.pred.poses[b];
    const PoseGrad& g = pg.d_poses[b];
    probe(&p.omega.x, h_pose, g.omega.x);
    probe(&p.omega.y, h_pose, g.omega.y);
    probe(&p.omega.z, h_pose, g.omega.z);
    probe(&p.trans.x, h_pose, g.trans.x);
    probe(&p.trans.y, h_pose, g.trans.y);
    probe(&p.trans.z, h_pose, g.trans.z);
  }
  return max_diff / std::max({norm_a, norm_f, 1e-12});
}

}  // namespace evcm_test
