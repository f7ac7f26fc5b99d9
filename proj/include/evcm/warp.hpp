#pragma once
// Per-event warping and splatting kernels plus the multi-reference contrast
// loss and its exact analytic backward pass.
//
// Conventions used throughout:
//  - All times are seconds relative to the window start (edge 0).
//  - A window of B flow bins has B+1 reference times, the bin edges.
//  - An event in bin j is warped backward to edges j..0 and forward to edges
//    j+1..B; both legs start at the event's own position, and the first
//    (partial) step of each leg samples bin j's flow at that position.
//  - Flow sampling clamps to the border cell; an event is masked (and then
//    contributes nothing anywhere) if any of its B+1 reference positions
//    leaves [0, W-1] x [0, H-1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "evcm/memtrack.hpp"
#include "evcm/types.hpp"

namespace evcm {

inline constexpr double kLossEps = 1e-9;

// ---- bilinear cell geometry -------------------------------------------------

// The 2x2 integer cell a continuous position falls in, with interpolation
// weights wx, wy in [0, 1]. Out-of-range positions clamp to the border cell.
struct BilinCell {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double wx = 0.0, wy = 0.0;

  double w00() const { return (1.0 - wx) * (1.0 - wy); }
  double w10() const { return wx * (1.0 - wy); }
  double w01() const { return (1.0 - wx) * wy; }
  double w11() const { return wx * wy; }
};

inline BilinCell bilin_cell(double x, double y, int width, int height) {
  BilinCell c;
  const double cx = std::clamp(x, 0.0, static_cast<double>(width - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(height - 1));
  c.x0 = width >= 2 ? std::min(static_cast<int>(std::floor(cx)), width - 2) : 0;
  c.y0 = height >= 2 ? std::min(static_cast<int>(std::floor(cy)), height - 2) : 0;
  c.x1 = std::min(c.x0 + 1, width - 1);
  c.y1 = std::min(c.y0 + 1, height - 1);
  c.wx = cx - c.x0;
  c.wy = cy - c.y0;
  return c;
}

inline bool in_bounds(Vec2 p, int width, int height) {
  return p.x >= 0.0 && p.x <= width - 1 && p.y >= 0.0 && p.y <= height - 1;
}

// ---- flow sampling ------------------------------------------------------------

inline Vec2 sample_flow(const FlowField& f, Vec2 p) {
  const BilinCell c = bilin_cell(p.x, p.y, f.width(), f.height());
  const double u = c.w00() * f.u.at(c.x0, c.y0) + c.w10() * f.u.at(c.x1, c.y0) +
                   c.w01() * f.u.at(c.x0, c.y1) + c.w11() * f.u.at(c.x1, c.y1);
  const double v = c.w00() * f.v.at(c.x0, c.y0) + c.w10() * f.v.at(c.x1, c.y0) +
                   c.w01() * f.v.at(c.x0, c.y1) + c.w11() * f.v.at(c.x1, c.y1);
  return {u, v};
}

// Row-major 2x2 spatial Jacobian of bilinear flow sampling.
struct Mat2 {
  double dux = 0.0, duy = 0.0;  // d(u)/dx, d(u)/dy
  double dvx = 0.0, dvy = 0.0;  // d(v)/dx, d(v)/dy
};

inline Mat2 sample_flow_jacobian(const FlowField& f, Vec2 p) {
  const BilinCell c = bilin_cell(p.x, p.y, f.width(), f.height());
  Mat2 j;
  j.dux = (1.0 - c.wy) * (f.u.at(c.x1, c.y0) - f.u.at(c.x0, c.y0)) +
          c.wy * (f.u.at(c.x1, c.y1) - f.u.at(c.x0, c.y1));
  j.duy = (1.0 - c.wx) * (f.u.at(c.x0, c.y1) - f.u.at(c.x0, c.y0)) +
          c.wx * (f.u.at(c.x1, c.y1) - f.u.at(c.x1, c.y0));
  j.dvx = (1.0 - c.wy) * (f.v.at(c.x1, c.y0) - f.v.at(c.x0, c.y0)) +
          c.wy * (f.v.at(c.x1, c.y1) - f.v.at(c.x0, c.y1));
  j.dvy = (1.0 - c.wx) * (f.v.at(c.x0, c.y1) - f.v.at(c.x0, c.y0)) +
          c.wx * (f.v.at(c.x1, c.y1) - f.v.at(c.x1, c.y0));
  return j;
}

// g_out = (I + dt*J)^T g
inline Vec2 apply_step_transpose(const Mat2& j, double dt, Vec2 g) {
  return {g.x * (1.0 + dt * j.dux) + g.y * dt * j.dvx,
          g.y * (1.0 + dt * j.dvy) + g.x * dt * j.duy};
}

// ---- single-event warping -----------------------------------------------------

// Advances a position from t_from to t_to (seconds on the window clock),
// stepping bin by bin: within each traversed bin i, pos advances by
// dt_i * u_i(pos) with u_i sampled bilinearly at the entry position and dt_i
// the signed time spent in that bin. Works in either time direction.
inline Vec2 warp_event(Vec2 pos, double t_from, double t_to, const FlowSequence& flows) {
  const int n = flows.n_bins();
  if (t_to == t_from || n == 0) return pos;
  // Edge times on the window clock.
  std::array<double, 64> small;
  std::vector<double> big;
  double* edges;
  if (n + 1 <= static_cast<int>(small.size())) {
    edges = small.data();
  } else {
    big.resize(static_cast<std::size_t>(n) + 1);
    edges = big.data();
  }
  for (int i = 0; i <= n; ++i) edges[i] = flows.edge_rel_s(i);

  if (t_to > t_from) {
    // Start in the bin holding t_from: largest j with edges[j] <= t_from.
    int j = static_cast<int>(std::upper_bound(edges, edges + n + 1, t_from) - edges) - 1;
    j = std::clamp(j, 0, n - 1);
    double t = t_from;
    while (t < t_to && j <= n - 1) {
      const double tn = std::min(edges[j + 1], t_to);
      pos = pos + (tn - t) * sample_flow(flows.fields[static_cast<std::size_t>(j)], pos);
      t = tn;
      ++j;
    }
  } else {
    // Moving backward, bin j covers (edges[j], edges[j+1]].
    int j = static_cast<int>(std::lower_bound(edges, edges + n + 1, t_from) - edges) - 1;
    j = std::clamp(j, 0, n - 1);
    double t = t_from;
    while (t > t_to && j >= 0) {
      const double tn = std::max(edges[j], t_to);
      pos = pos + (tn - t) * sample_flow(flows.fields[static_cast<std::size_t>(j)], pos);
      t = tn;
      --j;
    }
  }
  return pos;
}

// ---- splatting ------------------------------------------------------------------

// Adds weight*w_bilin into `count` and weight*w_bilin*value into `value_acc`
// at the four neighbors of pos. Caller guarantees pos is inside the image.
inline void splat_bilinear(Vec2 pos, double weight, double value, Image<double>& count,
                           Image<double>& value_acc) {
  const BilinCell c = bilin_cell(pos.x, pos.y, count.width(), count.height());
  const double w00 = weight * c.w00(), w10 = weight * c.w10();
  const double w01 = weight * c.w01(), w11 = weight * c.w11();
  count.at(c.x0, c.y0) += w00;
  count.at(c.x1, c.y0) += w10;
  count.at(c.x0, c.y1) += w01;
  count.at(c.x1, c.y1) += w11;
  value_acc.at(c.x0, c.y0) += w00 * value;
  value_acc.at(c.x1, c.y0) += w10 * value;
  value_acc.at(c.x0, c.y1) += w01 * value;
  value_acc.at(c.x1, c.y1) += w11 * value;
}

// ---- warp-window products ---------------------------------------------------------

// Per-reference-time, per-polarity accumulators: bilinear count mass and
// weighted normalized-timestamp mass, plus the per-reference count of pixels
// hit by at least one event (either polarity).
struct IweStack {
  int width = 0, height = 0;
  int n_refs = 0;
  std::vector<std::array<Image<double>, 2>> count;  // [ref][polarity]
  std::vector<std::array<Image<double>, 2>> tsum;
  mem::TrackedVector<std::int64_t> n_active;        // [ref]

  IweStack() = default;
  IweStack(int w, int h, int refs) : width(w), height(h), n_refs(refs) {
    count.reserve(static_cast<std::size_t>(refs));
    tsum.reserve(static_cast<std::size_t>(refs));
    for (int r = 0; r < refs; ++r) {
      count.push_back({Image<double>(w, h, 0.0), Image<double>(w, h, 0.0)});
      tsum.push_back({Image<double>(w, h, 0.0), Image<double>(w, h, 0.0)});
    }
    n_active.assign(static_cast<std::size_t>(refs), 0);
  }

  // Recounts pixels with nonzero polarity-merged mass for reference r.
  void refresh_active(int r) {
    const auto& c0 = count[static_cast<std::size_t>(r)][0];
    const auto& c1 = count[static_cast<std::size_t>(r)][1];
    std::int64_t n = 0;
    for (std::size_t i = 0; i < c0.size(); ++i) n += (c0[i] + c1[i] > 0.0) ? 1 : 0;
    n_active[static_cast<std::size_t>(r)] = n;
  }
};

// Reference-time positions for every event, stored event-major.
struct Trajectories {
  std::size_t n_events = 0;
  int n_refs = 0;
  mem::TrackedVector<Vec2> pos;           // n_events * n_refs
  mem::TrackedVector<std::uint8_t> alive; // 0 = masked out of bounds
  mem::TrackedVector<std::int32_t> bin;   // source bin index per event
  std::size_t n_alive = 0;

  void resize(std::size_t n, int refs) {
    n_events = n;
    n_refs = refs;
    pos.assign(n * static_cast<std::size_t>(refs), Vec2{});
    alive.assign(n, 0);
    bin.assign(n, 0);
    n_alive = 0;
  }

  Vec2* row(std::size_t k) { return pos.data() + k * static_cast<std::size_t>(n_refs); }
  const Vec2* row(std::size_t k) const {
    return pos.data() + k * static_cast<std::size_t>(n_refs);
  }
  Vec2 position(std::size_t k, int r) const {
    return pos[k * static_cast<std::size_t>(n_refs) + static_cast<std::size_t>(r)];
  }
};

// Per-bin, per-cell accumulators for dL/d(flow).
struct GradientBuffer {
  std::vector<Image<double>> gu, gv;  // [bin]

  GradientBuffer() = default;
  GradientBuffer(int width, int height, int n_bins) {
    gu.reserve(static_cast<std::size_t>(n_bins));
    gv.reserve(static_cast<std::size_t>(n_bins));
    for (int i = 0; i < n_bins; ++i) {
      gu.emplace_back(width, height, 0.0);
      gv.emplace_back(width, height, 0.0);
    }
  }

  int n_bins() const { return static_cast<int>(gu.size()); }
  int width() const { return gu.empty() ? 0 : gu.front().width(); }
  int height() const { return gu.empty() ? 0 : gu.front().height(); }

  void add(const GradientBuffer& o) {
    for (std::size_t b = 0; b < gu.size(); ++b) {
      for (std::size_t i = 0; i < gu[b].size(); ++i) gu[b][i] += o.gu[b][i];
      for (std::size_t i = 0; i < gv[b].size(); ++i) gv[b][i] += o.gv[b][i];
    }
  }
  void zero() {
    for (auto& im : gu) im.fill(0.0);
    for (auto& im : gv) im.fill(0.0);
  }
};

// ---- trajectory construction ------------------------------------------------------

// Fills pos[0..B] with the event's position at every bin edge and reports
// whether all of them stay inside the image. `edges_s` has B+1 entries on the
// window clock; j is the event's bin; t_rel its time.
inline bool build_trajectory(Vec2 x0, double t_rel, int j, const FlowSequence& flows,
                             const double* edges_s, int B, int width, int height,
                             Vec2* pos) {
  // Backward leg: partial step inside bin j (sampled at the event position),
  // then whole bins j-1..0, each sampled at the entry (later-time) position.
  Vec2 p = x0 + (edges_s[j] - t_rel) * sample_flow(flows.fields[static_cast<std::size_t>(j)], x0);
  pos[j] = p;
  for (int i = j; i >= 1; --i) {
    p = p + (edges_s[i - 1] - edges_s[i]) *
                sample_flow(flows.fields[static_cast<std::size_t>(i - 1)], p);
    pos[i - 1] = p;
  }
  // Forward leg: partial step inside bin j, then whole bins j+1..B-1.
  p = x0 + (edges_s[j + 1] - t_rel) *
               sample_flow(flows.fields[static_cast<std::size_t>(j)], x0);
  pos[j + 1] = p;
  for (int i = j + 1; i <= B - 1; ++i) {
    p = p + (edges_s[i + 1] - edges_s[i]) *
                sample_flow(flows.fields[static_cast<std::size_t>(i)], p);
    pos[i + 1] = p;
  }
  bool ok = true;
  for (int r = 0; r <= B; ++r) ok = ok && in_bounds(pos[r], width, height);
  return ok;
}

// Largest j with edges_s[j] <= t_rel, clamped to a valid bin index.
inline int bin_of(double t_rel, const double* edges_s, int B) {
  const int j =
      static_cast<int>(std::upper_bound(edges_s, edges_s + B + 1, t_rel) - edges_s) - 1;
  return std::clamp(j, 0, B - 1);
}

// ---- loss -----------------------------------------------------------------------

struct LossResult {
  double value = 0.0;
  bool no_survivors = false;  // warning: every event was masked (or none given)
};

// Contribution of reference r: sum over pixels and polarities of the squared
// per-pixel average timestamp, scaled by 1/(n_active + eps).
inline double reference_loss(const IweStack& stack, int r) {
  const auto& sr = stack.tsum[static_cast<std::size_t>(r)];
  const auto& cr = stack.count[static_cast<std::size_t>(r)];
  double acc = 0.0;
  for (int c = 0; c < kPolarities; ++c) {
    const Image<double>& S = sr[static_cast<std::size_t>(c)];
    const Image<double>& C = cr[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double a = S[i] / (C[i] + kLossEps);
      acc += a * a;
    }
  }
  return acc / (static_cast<double>(stack.n_active[static_cast<std::size_t>(r)]) + kLossEps);
}

inline LossResult contrast_loss(const IweStack& stack) {
  LossResult res;
  std::int64_t total_active = 0;
  for (int r = 0; r < stack.n_refs; ++r)
    total_active += stack.n_active[static_cast<std::size_t>(r)];
  if (total_active == 0) {
    res.no_survivors = true;
    return res;
  }
  double sum = 0.0;
  for (int r = 0; r < stack.n_refs; ++r) sum += reference_loss(stack, r);
  res.value = sum / static_cast<double>(stack.n_refs);
  return res;
}

// ---- backward kernels ---------------------------------------------------------------

// dL/d(position at reference r) for one surviving event: differentiates the
// four splat weights against the per-pixel loss gradients, which are formed
// on the fly from the stack (S, C, n_active are all that is needed).
inline Vec2 splat_position_grad(const IweStack& stack, int r, int pol_idx, Vec2 pos_r,
                                double tbar, double lane_weight) {
  const Image<double>& S = stack.tsum[static_cast<std::size_t>(r)][static_cast<std::size_t>(pol_idx)];
  const Image<double>& C = stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(pol_idx)];
  const double scale =
      2.0 /
      ((static_cast<double>(stack.n_active[static_cast<std::size_t>(r)]) + kLossEps) *
       static_cast<double>(stack.n_refs));
  const BilinCell c = bilin_cell(pos_r.x, pos_r.y, S.width(), S.height());

  // dL/dw_i for each corner i, with w_i the splatted count mass there.
  const auto corner = [&](int x, int y) {
    const double inv = 1.0 / (C.at(x, y) + kLossEps);
    const double a = S.at(x, y) * inv;
    // d(ref loss)/dS = scale*a*inv; d(ref loss)/dC = -scale*a*inv*a.
    return scale * a * inv * (tbar - a) * lane_weight;
  };
  const double g00 = corner(c.x0, c.y0), g10 = corner(c.x1, c.y0);
  const double g01 = corner(c.x0, c.y1), g11 = corner(c.x1, c.y1);

  Vec2 d;
  d.x = -(1.0 - c.wy) * g00 + (1.0 - c.wy) * g10 - c.wy * g01 + c.wy * g11;
  d.y = -(1.0 - c.wx) * g00 - c.wx * g10 + (1.0 - c.wx) * g01 + c.wx * g11;
  return d;
}

// Reverse accumulation through both warp legs of one event. `d` holds the
// loss gradient w.r.t. each reference position; flow-cell gradients are
// distributed bilinearly through `sink.add(bin, position, gradient)`.
template <typename Sink>
inline void backprop_trajectory(Vec2 x0, double t_rel, int j, const FlowSequence& flows,
                                const double* edges_s, int B, const Vec2* pos,
                                const Vec2* d, Sink&& sink) {
  // Backward leg, reverse order: pos[0] was computed last.
  Vec2 g = d[0];
  for (int i = 0; i <= j - 1; ++i) {
    const double dt = edges_s[i] - edges_s[i + 1];
    sink.add(i, pos[i + 1], dt * g);
    const Mat2 jac = sample_flow_jacobian(flows.fields[static_cast<std::size_t>(i)], pos[i + 1]);
    g = apply_step_transpose(jac, dt, g);
    g = g + d[i + 1];
  }
  sink.add(j, x0, (edges_s[j] - t_rel) * g);  // partial step, sampled at x0

  // Forward leg.
  g = d[B];
  for (int i = B - 1; i >= j + 1; --i) {
    const double dt = edges_s[i + 1] - edges_s[i];
    sink.add(i, pos[i], dt * g);
    const Mat2 jac = sample_flow_jacobian(flows.fields[static_cast<std::size_t>(i)], pos[i]);
    g = apply_step_transpose(jac, dt, g);
    g = g + d[i];
  }
  sink.add(j, x0, (edges_s[j + 1] - t_rel) * g);
}

// Accumulates into a private GradientBuffer (deterministic path).
struct BufferGradSink {
  GradientBuffer* buf;

  void add(int bin, Vec2 at, Vec2 g) {
    Image<double>& gu = buf->gu[static_cast<std::size_t>(bin)];
    Image<double>& gv = buf->gv[static_cast<std::size_t>(bin)];
    const BilinCell c = bilin_cell(at.x, at.y, gu.width(), gu.height());
    gu.at(c.x0, c.y0) += c.w00() * g.x;
    gu.at(c.x1, c.y0) += c.w10() * g.x;
    gu.at(c.x0, c.y1) += c.w01() * g.x;
    gu.at(c.x1, c.y1) += c.w11() * g.x;
    gv.at(c.x0, c.y0) += c.w00() * g.y;
    gv.at(c.x1, c.y0) += c.w10() * g.y;
    gv.at(c.x0, c.y1) += c.w01() * g.y;
    gv.at(c.x1, c.y1) += c.w11() * g.y;
  }
};

}  // namespace evcm
