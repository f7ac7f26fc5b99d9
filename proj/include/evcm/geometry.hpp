#pragma once
// Rigid-motion geometry: rotation vectors to matrices with analytic
// derivatives, pinhole reprojection, depth + ego-motion to optical flow, and
// the normalized depth-consistency loss between two views.
//
// Depth here is unitless: (depth, translation) form one scale family, so
// scaling both by the same factor leaves every pixel motion unchanged.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "evcm/types.hpp"
#include "evcm/warp.hpp"

namespace evcm {

// ---- small linear algebra ----------------------------------------------------

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

// Row-major 3x3 matrix, just enough for rotations.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity() { return {{1, 0, 0, 0, 1, 0, 0, 0, 1}}; }

  double& operator()(int r, int c) { return m[static_cast<std::size_t>(3 * r + c)]; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(3 * r + c)]; }

  Vec3 col(int c) const {
    return {m[static_cast<std::size_t>(c)], m[static_cast<std::size_t>(3 + c)],
            m[static_cast<std::size_t>(6 + c)]};
  }

  Mat3 transposed() const {
    return {{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  friend Mat3 operator+(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[static_cast<std::size_t>(i)] =
        a.m[static_cast<std::size_t>(i)] + b.m[static_cast<std::size_t>(i)];
    return r;
  }
  friend Mat3 operator-(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[static_cast<std::size_t>(i)] =
        a.m[static_cast<std::size_t>(i)] - b.m[static_cast<std::size_t>(i)];
    return r;
  }
  friend Mat3 operator*(double s, const Mat3& a) {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[static_cast<std::size_t>(i)] =
        s * a.m[static_cast<std::size_t>(i)];
    return r;
  }
  friend Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        r(i, j) = a(i, 0) * b(0, j) + a(i, 1) * b(1, j) + a(i, 2) * b(2, j);
    return r;
  }
  friend Vec3 operator*(const Mat3& a, Vec3 v) {
    return {a.m[0] * v.x + a.m[1] * v.y + a.m[2] * v.z,
            a.m[3] * v.x + a.m[4] * v.y + a.m[5] * v.z,
            a.m[6] * v.x + a.m[7] * v.y + a.m[8] * v.z};
  }
};

inline Mat3 skew(Vec3 v) {
  return {{0, -v.z, v.y, v.z, 0, -v.x, -v.y, v.x, 0}};
}

// ---- rotation vector <-> rotation matrix -------------------------------------

// R = I + a [w]x + b [w]x^2 with a = sin(t)/t and b = (1 - cos(t))/t^2 at
// angle t = |omega|. Angles below 1e-8 use the series a = 1 - t^2/6,
// b = 1/2 - t^2/24, which is exact to double precision there.
// Expects |omega| < pi (the caller's contract, as in PoseStep::validate).
inline Mat3 rodrigues(Vec3 omega) {
  const double t2 = dot(omega, omega);
  const double t = std::sqrt(t2);
  double a, b;
  if (t < 1e-8) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  const Mat3 w = skew(omega);
  return Mat3::identity() + a * w + b * (w * w);
}

// Partial derivative of rodrigues(omega) with respect to each component,
// via the compact closed form
//   dR/dw_k = ((w_k [w]x + [w x ((I - R) e_k)]x) / |w|^2) R,
// falling back below angle 1e-4 to the series derivative
//   dR/dw_k = [e_k]x + ([e_k]x [w]x + [w]x [e_k]x) / 2.
inline std::array<Mat3, 3> rodrigues_jacobian(Vec3 omega) {
  const double t2 = dot(omega, omega);
  const double t = std::sqrt(t2);
  const Mat3 w = skew(omega);
  std::array<Mat3, 3> out;
  if (t < 1e-4) {
    for (int k = 0; k < 3; ++k) {
      const Vec3 e{k == 0 ? 1.0 : 0.0, k == 1 ? 1.0 : 0.0, k == 2 ? 1.0 : 0.0};
      const Mat3 ek = skew(e);
      out[static_cast<std::size_t>(k)] = ek + 0.5 * (ek * w + w * ek);
    }
    return out;
  }
  const Mat3 r = rodrigues(omega);
  const Mat3 i_minus_r = Mat3::identity() - r;
  const double wk[3] = {omega.x, omega.y, omega.z};
  for (int k = 0; k < 3; ++k) {
    const Vec3 c = cross(omega, i_minus_r.col(k));
    out[static_cast<std::size_t>(k)] = (1.0 / t2) * ((wk[k] * w + skew(c)) * r);
  }
  return out;
}

// Pose q with R(q) = R(p)^T and trans(q) = -R(p)^T trans(p): applying p then
// q moves every point back to where it started.
inline PoseStep inverse_pose(const PoseStep& p) {
  const Mat3 rt = rodrigues(p.omega).transposed();
  return {-1.0 * p.omega, -1.0 * (rt * p.trans)};
}

// ---- pinhole reprojection -----------------------------------------------------

// Ray through pixel x scaled to the given depth.
inline Vec3 backproject(Vec2 x, double depth, const CameraIntrinsics& k) {
  return {depth * (x.x - k.cx) / k.fx, depth * (x.y - k.cy) / k.fy, depth};
}

struct Reprojection {
  Vec2 pixel;      // where the point lands in the target view
  double z = 0.0;  // its depth in the target view
  bool valid = false;  // false when the point ends up behind the camera
};

inline Reprojection reproject(Vec2 x, double depth, const Mat3& rot, Vec3 trans,
                              const CameraIntrinsics& k) {
  const Vec3 p = rot * backproject(x, depth, k) + trans;
  Reprojection out;
  out.z = p.z;
  if (!(p.z > 0.0)) return out;
  out.valid = true;
  out.pixel = {k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy};
  return out;
}

inline Reprojection reproject(Vec2 x, double depth, const PoseStep& pose,
                              const CameraIntrinsics& k) {
  return reproject(x, depth, rodrigues(pose.omega), pose.trans, k);
}

// Reprojection plus derivatives of the target pixel and target depth with
// respect to the source depth, the translation, and the rotation vector.
// All derivative fields are zero when the point is invalid.
struct ReprojectGrads {
  Reprojection value;
  Vec2 d_pixel_d_depth;
  double d_z_d_depth = 0.0;
  std::array<Vec2, 3> d_pixel_d_trans{};  // d z / d trans is (0, 0, 1)
  std::array<Vec2, 3> d_pixel_d_omega{};
  std::array<double, 3> d_z_d_omega{};
};

inline ReprojectGrads reproject_with_grads(Vec2 x, double depth, const Mat3& rot,
                                           const std::array<Mat3, 3>& drot, Vec3 trans,
                                           const CameraIntrinsics& k) {
  ReprojectGrads g;
  const Vec3 ray = backproject(x, 1.0, k);  // unit-depth ray through x
  const Vec3 rray = rot * ray;
  const Vec3 p = depth * rray + trans;
  g.value.z = p.z;
  if (!(p.z > 0.0)) return g;
  g.value.valid = true;
  g.value.pixel = {k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy};
  // Rows of the projection Jacobian d pixel / d point.
  const double iz = 1.0 / p.z;
  const Vec3 ju{k.fx * iz, 0.0, -k.fx * p.x * iz * iz};
  const Vec3 jv{0.0, k.fy * iz, -k.fy * p.y * iz * iz};
  g.d_pixel_d_depth = {dot(ju, rray), dot(jv, rray)};
  g.d_z_d_depth = rray.z;
  g.d_pixel_d_trans = {Vec2{ju.x, jv.x}, Vec2{ju.y, jv.y}, Vec2{ju.z, jv.z}};
  for (int i = 0; i < 3; ++i) {
    const Vec3 q = depth * (drot[static_cast<std::size_t>(i)] * ray);
    g.d_pixel_d_omega[static_cast<std::size_t>(i)] = {dot(ju, q), dot(jv, q)};
    g.d_z_d_omega[static_cast<std::size_t>(i)] = q.z;
  }
  return g;
}

inline ReprojectGrads reproject_with_grads(Vec2 x, double depth, const PoseStep& pose,
                                           const CameraIntrinsics& k) {
  return reproject_with_grads(x, depth, rodrigues(pose.omega),
                              rodrigues_jacobian(pose.omega), pose.trans, k);
}

// ---- depth + ego-motion to flow ------------------------------------------------

struct GeometryFlows {
  FlowSequence flows;
  std::vector<Image<std::uint8_t>> valid;  // per bin; zero where the pixel had
                                           // no usable depth or left the view
};

// Per bin i with motion poses[i], the flow at pixel x is
// (reproject(x, depth(x), poses[i]) - x) / bin_duration, in px/s. Pixels with
// invalid depth or a behind-camera reprojection get zero flow and a clear
// valid bit.
inline GeometryFlows depth_pose_to_flows(const DepthMap& depth,
                                         const std::vector<PoseStep>& poses,
                                         const CameraIntrinsics& k,
                                         std::uint64_t t_start_us,
                                         std::uint64_t t_end_us) {
  if (poses.empty()) throw ConfigError("depth_pose_to_flows: need one pose per bin");
  if (depth.d.empty()) throw DimensionMismatchError("depth_pose_to_flows: empty depth");
  const int w = depth.width();
  const int h = depth.height();
  GeometryFlows out;
  out.flows = FlowSequence::zeros(w, h, t_start_us, t_end_us,
                                  static_cast<int>(poses.size()));
  out.valid.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    poses[i].validate();
    const Mat3 rot = rodrigues(poses[i].omega);
    FlowField& f = out.flows.fields[i];
    const double inv_dt = 1.0 / f.bin_duration_s;
    Image<std::uint8_t> mask(w, h, 0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!depth.is_valid(x, y)) continue;
        const double d = depth.d.at(x, y);
        if (!(d > 0.0)) continue;
        const Vec2 px{static_cast<double>(x), static_cast<double>(y)};
        const Reprojection rp = reproject(px, d, rot, poses[i].trans, k);
        if (!rp.valid) continue;
        f.u.at(x, y) = (rp.pixel.x - px.x) * inv_dt;
        f.v.at(x, y) = (rp.pixel.y - px.y) * inv_dt;
        mask.at(x, y) = 1;
      }
    }
    out.valid.push_back(std::move(mask));
  }
  return out;
}

struct PoseGrad {
  Vec3 omega;
  Vec3 trans;
};

struct FlowsBackwardResult {
  Image<double> d_depth;
  std::vector<PoseGrad> d_poses;
};

// Pulls per-cell flow gradients back onto the depth map and the per-bin
// poses through depth_pose_to_flows. `flows` supplies the bin layout the
// forward pass produced; `grad` holds d loss / d flow for every bin and cell.
inline FlowsBackwardResult depth_pose_to_flows_backward(
    const DepthMap& depth, const std::vector<PoseStep>& poses,
    const CameraIntrinsics& k, const FlowSequence& flows, const GradientBuffer& grad) {
  const int w = depth.width();
  const int h = depth.height();
  if (flows.n_bins() != static_cast<int>(poses.size()) ||
      grad.n_bins() != flows.n_bins())
    throw ConfigError("flows backward: bins, poses, and gradients must align");
  if (flows.width() != w || flows.height() != h || grad.width() != w ||
      grad.height() != h)
    throw DimensionMismatchError("flows backward: grids must match the depth map");
  FlowsBackwardResult out;
  out.d_depth = Image<double>(w, h, 0.0);
  out.d_poses.assign(poses.size(), PoseGrad{});
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Mat3 rot = rodrigues(poses[i].omega);
    const std::array<Mat3, 3> drot = rodrigues_jacobian(poses[i].omega);
    const double inv_dt = 1.0 / flows.fields[i].bin_duration_s;
    PoseGrad& pg = out.d_poses[i];
    double* d_omega[3] = {&pg.omega.x, &pg.omega.y, &pg.omega.z};
    double* d_trans[3] = {&pg.trans.x, &pg.trans.y, &pg.trans.z};
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double gu = grad.gu[i].at(x, y);
        const double gv = grad.gv[i].at(x, y);
        if (gu == 0.0 && gv == 0.0) continue;
        if (!depth.is_valid(x, y)) continue;
        const double d = depth.d.at(x, y);
        if (!(d > 0.0)) continue;
        const Vec2 px{static_cast<double>(x), static_cast<double>(y)};
        const ReprojectGrads rg =
            reproject_with_grads(px, d, rot, drot, poses[i].trans, k);
        if (!rg.value.valid) continue;
        out.d_depth.at(x, y) +=
            (gu * rg.d_pixel_d_depth.x + gv * rg.d_pixel_d_depth.y) * inv_dt;
        for (int c = 0; c < 3; ++c) {
          const std::size_t ci = static_cast<std::size_t>(c);
          *d_trans[c] += (gu * rg.d_pixel_d_trans[ci].x +
                          gv * rg.d_pixel_d_trans[ci].y) * inv_dt;
          *d_omega[c] += (gu * rg.d_pixel_d_omega[ci].x +
                          gv * rg.d_pixel_d_omega[ci].y) * inv_dt;
        }
      }
    }
  }
  return out;
}

// ---- depth-consistency loss ----------------------------------------------------

struct GeoLossTerms {
  Image<double> projected;     // source depth carried into the target view
  Image<double> interpolated;  // target depth sampled where the pixel lands
  Image<std::uint8_t> valid;   // source pixels entering the average
  double value = 0.0;
  std::int64_t n_valid = 0;
  bool empty_valid_set = true;
};

struct GeoLossGrad {
  GeoLossTerms terms;
  Image<double> d_d0;
  Image<double> d_d1;
  Vec3 d_omega;
  Vec3 d_trans;
};

namespace detail {

// Everything pass 1 learns about one source pixel's projection.
struct ProjectedPixel {
  Vec2 pixel;
  double z = 0.0;
  int nx = 0, ny = 0;  // nearest target cell
  bool ok = false;
};

// Projects every usable source pixel and resolves occlusion: each nearest
// target cell keeps only its closest (smallest projected depth) source pixel.
// Returns false if nothing projected into view.
inline bool project_with_zmin(const DepthMap& d0, const Mat3& rot, Vec3 trans,
                              const CameraIntrinsics& k,
                              std::vector<ProjectedPixel>* proj,
                              Image<std::int64_t>* winner) {
  const int w = d0.width();
  const int h = d0.height();
  Image<double> zbuf(w, h, std::numeric_limits<double>::infinity());
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = d0.d.idx(x, y);
      if (!d0.is_valid(x, y)) continue;
      const double d = d0.d.at(x, y);
      if (!(d > 0.0)) continue;
      const Reprojection rp =
          reproject({static_cast<double>(x), static_cast<double>(y)}, d, rot, trans, k);
      if (!rp.valid || !in_bounds(rp.pixel, w, h)) continue;
      ProjectedPixel& p = (*proj)[idx];
      p.pixel = rp.pixel;
      p.z = rp.z;
      p.nx = static_cast<int>(std::lround(rp.pixel.x));
      p.ny = static_cast<int>(std::lround(rp.pixel.y));
      p.ok = true;
      any = true;
      if (rp.z < zbuf.at(p.nx, p.ny)) {
        zbuf.at(p.nx, p.ny) = rp.z;
        winner->at(p.nx, p.ny) = static_cast<std::int64_t>(idx);
      }
    }
  }
  return any;
}

// Bilinear sample of the target depth, requiring all touched cells valid and
// the result positive. Also returns the sample's spatial gradient.
inline bool sample_target_depth(const DepthMap& d1, Vec2 at, double* value,
                                Vec2* spatial_grad) {
  const BilinCell c = bilin_cell(at.x, at.y, d1.width(), d1.height());
  if (d1.has_mask() && !(d1.is_valid(c.x0, c.y0) && d1.is_valid(c.x1, c.y0) &&
                         d1.is_valid(c.x0, c.y1) && d1.is_valid(c.x1, c.y1)))
    return false;
  const double v00 = d1.d.at(c.x0, c.y0), v10 = d1.d.at(c.x1, c.y0);
  const double v01 = d1.d.at(c.x0, c.y1), v11 = d1.d.at(c.x1, c.y1);
  *value = c.w00() * v00 + c.w10() * v10 + c.w01() * v01 + c.w11() * v11;
  if (!(*value > 0.0)) return false;
  spatial_grad->x = (1.0 - c.wy) * (v10 - v00) + c.wy * (v11 - v01);
  spatial_grad->y = (1.0 - c.wx) * (v01 - v00) + c.wx * (v11 - v10);
  return true;
}

}  // namespace detail

// Normalized difference |a - b| / (a + b) between the forward-projected depth
// a and the target depth b interpolated where each pixel lands, averaged over
// the valid set: pixels whose projection stays in view, survives the z-min
// occlusion test at its nearest target cell, and meets positive depth on both
// sides. Returns value 0 with the empty flag set when no pixel qualifies.
inline GeoLossTerms geometry_consistency_loss(const DepthMap& d0, const DepthMap& d1,
                                              const PoseStep& pose,
                                              const CameraIntrinsics& k) {
  if (!d0.d.same_shape(d1.d))
    throw DimensionMismatchError("depth consistency: depth maps must share a shape");
  const int w = d0.width();
  const int h = d0.height();
  GeoLossTerms out;
  out.projected = Image<double>(w, h, 0.0);
  out.interpolated = Image<double>(w, h, 0.0);
  out.valid = Image<std::uint8_t>(w, h, 0);
  const Mat3 rot = rodrigues(pose.omega);
  std::vector<detail::ProjectedPixel> proj(static_cast<std::size_t>(w) *
                                           static_cast<std::size_t>(h));
  Image<std::int64_t> winner(w, h, -1);
  if (!detail::project_with_zmin(d0, rot, pose.trans, k, &proj, &winner)) return out;
  double sum = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = out.projected.idx(x, y);
      const detail::ProjectedPixel& p = proj[idx];
      if (!p.ok || winner.at(p.nx, p.ny) != static_cast<std::int64_t>(idx)) continue;
      double b;
      Vec2 db;
      if (!detail::sample_target_depth(d1, p.pixel, &b, &db)) continue;
      out.projected.at(x, y) = p.z;
      out.interpolated.at(x, y) = b;
      out.valid.at(x, y) = 1;
      ++out.n_valid;
      sum += std::abs(p.z - b) / (p.z + b);
    }
  }
  if (out.n_valid > 0) {
    out.value = sum / static_cast<double>(out.n_valid);
    out.empty_valid_set = false;
  }
  return out;
}

// Loss plus analytic gradients with respect to both depth maps and the pose,
// scaled by `upstream`. Valid-set membership and occlusion winners are held
// fixed, as the loss is piecewise smooth in them.
inline GeoLossGrad geometry_consistency_loss_backward(const DepthMap& d0,
                                                      const DepthMap& d1,
                                                      const PoseStep& pose,
                                                      const CameraIntrinsics& k,
                                                      double upstream = 1.0) {
  if (!d0.d.same_shape(d1.d))
    throw DimensionMismatchError("depth consistency: depth maps must share a shape");
  const int w = d0.width();
  const int h = d0.height();
  GeoLossGrad out;
  out.terms.projected = Image<double>(w, h, 0.0);
  out.terms.interpolated = Image<double>(w, h, 0.0);
  out.terms.valid = Image<std::uint8_t>(w, h, 0);
  out.d_d0 = Image<double>(w, h, 0.0);
  out.d_d1 = Image<double>(w, h, 0.0);
  const Mat3 rot = rodrigues(pose.omega);
  const std::array<Mat3, 3> drot = rodrigues_jacobian(pose.omega);
  std::vector<detail::ProjectedPixel> proj(static_cast<std::size_t>(w) *
                                           static_cast<std::size_t>(h));
  Image<std::int64_t> winner(w, h, -1);
  if (!detail::project_with_zmin(d0, rot, pose.trans, k, &proj, &winner)) return out;
  double sum = 0.0;
  double* d_omega[3] = {&out.d_omega.x, &out.d_omega.y, &out.d_omega.z};
  double* d_trans[3] = {&out.d_trans.x, &out.d_trans.y, &out.d_trans.z};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = out.d_d0.idx(x, y);
      const detail::ProjectedPixel& p = proj[idx];
      if (!p.ok || winner.at(p.nx, p.ny) != static_cast<std::int64_t>(idx)) continue;
      double b;
      Vec2 db;
      if (!detail::sample_target_depth(d1, p.pixel, &b, &db)) continue;
      const double a = p.z;
      out.terms.projected.at(x, y) = a;
      out.terms.interpolated.at(x, y) = b;
      out.terms.valid.at(x, y) = 1;
      ++out.terms.n_valid;
      sum += std::abs(a - b) / (a + b);
      // d|a-b|/(a+b): sign 0 at a == b makes the term's gradient vanish there.
      const double s = (a > b) ? 1.0 : (a < b ? -1.0 : 0.0);
      const double inv_ab = 1.0 / ((a + b) * (a + b));
      const double ga = 2.0 * s * b * inv_ab;   // d term / d a
      const double gb = -2.0 * s * a * inv_ab;  // d term / d b
      const ReprojectGrads rg = reproject_with_grads(
          {static_cast<double>(x), static_cast<double>(y)}, d0.d.at(x, y), rot, drot,
          pose.trans, k);
      // b depends on the landing position, which moves with depth and pose.
      out.d_d0.at(x, y) += ga * rg.d_z_d_depth +
                           gb * (db.x * rg.d_pixel_d_depth.x +
                                 db.y * rg.d_pixel_d_depth.y);
      const BilinCell c = bilin_cell(p.pixel.x, p.pixel.y, w, h);
      out.d_d1.at(c.x0, c.y0) += gb * c.w00();
      out.d_d1.at(c.x1, c.y0) += gb * c.w10();
      out.d_d1.at(c.x0, c.y1) += gb * c.w01();
      out.d_d1.at(c.x1, c.y1) += gb * c.w11();
      for (int comp = 0; comp < 3; ++comp) {
        const std::size_t ci = static_cast<std::size_t>(comp);
        *d_trans[comp] += ga * (comp == 2 ? 1.0 : 0.0) +
                          gb * (db.x * rg.d_pixel_d_trans[ci].x +
                                db.y * rg.d_pixel_d_trans[ci].y);
        *d_omega[comp] += ga * rg.d_z_d_omega[ci] +
                          gb * (db.x * rg.d_pixel_d_omega[ci].x +
                                db.y * rg.d_pixel_d_omega[ci].y);
      }
    }
  }
  if (out.terms.n_valid > 0) {
    out.terms.value = sum / static_cast<double>(out.terms.n_valid);
    out.terms.empty_valid_set = false;
    const double scale = upstream / static_cast<double>(out.terms.n_valid);
    for (std::size_t i = 0; i < out.d_d0.size(); ++i) out.d_d0[i] *= scale;
    for (std::size_t i = 0; i < out.d_d1.size(); ++i) out.d_d1[i] *= scale;
    out.d_omega = scale * out.d_omega;
    out.d_trans = scale * out.d_trans;
  }
  return out;
}

// ---- objective composition ------------------------------------------------------

inline constexpr double kGeoWeightDefault = 0.05;

inline double total_loss(double contrast, double geo,
                         double weight = kGeoWeightDefault) {
  return contrast + weight * geo;
}

}  // namespace evcm
