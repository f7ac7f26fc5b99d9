#pragma once
// Finite-difference gradient checking support: margin-validated random
// instances (so central differences stay on one smooth branch of the
// piecewise-smooth loss) and the relative-error comparison itself.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "evcm/engine.hpp"
#include "evcm/types.hpp"
#include "evcm/warp.hpp"

namespace evcm {

struct FdInstance {
  EventSlice slice;
  FlowSequence flows;
  std::size_t n_masked = 0;
};

struct FdInstanceParams {
  int min_dim = 8, max_dim = 16;
  int max_bins = 3;
  int max_events = 50;
  double window_s = 0.1;
  double max_flow = 12.0;        // px/s; keeps total displacement ~1 px
  double lattice_margin = 1e-3;  // min distance of any fractional part from {0,1}
  double border_margin = 0.02;   // min distance from the masking boundary
  bool want_masked = false;      // require at least one masked event
};

// The loss is smooth in the flows except where a trajectory position crosses
// a pixel lattice line (bilinear kink), enters/leaves the image (masking
// jump), or a pixel's count mass touches zero (n_active jump). A valid
// instance keeps every trajectory position away from those boundaries by a
// margin that an h=1e-4 flow perturbation cannot bridge.
inline bool instance_margins_ok(const FdInstance& inst, const FdInstanceParams& p,
                                std::size_t* n_masked_out) {
  const int B = inst.flows.n_bins();
  std::vector<double> edges(static_cast<std::size_t>(B) + 1);
  for (int i = 0; i <= B; ++i) edges[static_cast<std::size_t>(i)] = inst.flows.edge_rel_s(i);
  const int W = inst.slice.width, H = inst.slice.height;
  std::vector<Vec2> pos(static_cast<std::size_t>(B) + 1);
  std::size_t masked = 0;

  for (const Event& e : inst.slice.events) {
    const double t_rel = (static_cast<double>(e.t_us) -
                          static_cast<double>(inst.slice.t_start_us)) * 1e-6;
    const int j = bin_of(t_rel, edges.data(), B);
    // The event's own time must sit away from the bin edges so its partial
    // steps cannot change bin under perturbation.
    if (t_rel - edges[static_cast<std::size_t>(j)] < 1e-4 ||
        edges[static_cast<std::size_t>(j) + 1] - t_rel < 1e-4)
      return false;
    build_trajectory({static_cast<double>(e.x), static_cast<double>(e.y)}, t_rel, j,
                           inst.flows, edges.data(), B, W, H, pos.data());
    // First decide the masking fate; any reference position within the border
    // margin (inside or outside) could flip it under perturbation -> reject.
    bool exits = false;
    for (int r = 0; r <= B; ++r) {
      const Vec2 q = pos[static_cast<std::size_t>(r)];
      const double border_dist =
          std::min(std::min(q.x, W - 1 - q.x), std::min(q.y, H - 1 - q.y));
      if (std::abs(border_dist) < p.border_margin) return false;
      if (border_dist < 0.0) exits = true;
    }
    if (!exits) {
      // Surviving events must keep every warped position off the pixel
      // lattice; the event's own (integer) source position never moves and
      // needs no margin, but it is not among pos[] unless a partial step has
      // zero length, which the time margin above already excludes.
      for (int r = 0; r <= B; ++r) {
        const Vec2 q = pos[static_cast<std::size_t>(r)];
        const double fx = q.x - std::floor(q.x);
        const double fy = q.y - std::floor(q.y);
        if (fx < p.lattice_margin || fx > 1.0 - p.lattice_margin ||
            fy < p.lattice_margin || fy > 1.0 - p.lattice_margin)
          return false;
      }
    }
    if (exits) ++masked;
  }
  if (p.want_masked && masked == 0) return false;
  if (masked == inst.slice.events.size()) return false;  // needs survivors
  if (n_masked_out) *n_masked_out = masked;
  return true;
}

// Deterministic rejection sampling: sub-seeds derive from `seed` until an
// instance passes the margin checks.
inline FdInstance random_fd_instance(std::uint64_t seed, const FdInstanceParams& p = {}) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng(seed * 1000003ull + attempt);
    FdInstance inst;
    std::uniform_int_distribution<int> dim(p.min_dim, p.max_dim);
    const int W = dim(rng), H = dim(rng);
    const int B = std::uniform_int_distribution<int>(1, p.max_bins)(rng);
    const int n_events = std::uniform_int_distribution<int>(1, p.max_events)(rng);
    const std::uint64_t window_us = static_cast<std::uint64_t>(p.window_s * 1e6);

    inst.slice.width = static_cast<std::uint16_t>(W);
    inst.slice.height = static_cast<std::uint16_t>(H);
    inst.slice.t_start_us = 0;
    inst.slice.t_end_us = window_us;
    std::vector<std::uint64_t> ts(static_cast<std::size_t>(n_events));
    std::uniform_int_distribution<std::uint64_t> td(1, window_us - 1);
    for (auto& t : ts) t = td(rng);
    std::sort(ts.begin(), ts.end());
    // Masked events come from a border strip; unmasked ones from the interior.
    std::uniform_int_distribution<int> xin(1, W - 2), yin(1, H - 2), pol(0, 1);
    std::uniform_int_distribution<int> edge_pick(0, 3);
    for (int k = 0; k < n_events; ++k) {
      Event e;
      e.t_us = ts[static_cast<std::size_t>(k)];
      const bool border = p.want_masked && (k % 7 == 0);
      if (border) {
        switch (edge_pick(rng)) {
          case 0: e.x = 0; e.y = static_cast<std::uint16_t>(yin(rng)); break;
          case 1: e.x = static_cast<std::uint16_t>(W - 1); e.y = static_cast<std::uint16_t>(yin(rng)); break;
          case 2: e.x = static_cast<std::uint16_t>(xin(rng)); e.y = 0; break;
          default: e.x = static_cast<std::uint16_t>(xin(rng)); e.y = static_cast<std::uint16_t>(H - 1); break;
        }
      } else {
        e.x = static_cast<std::uint16_t>(xin(rng));
        e.y = static_cast<std::uint16_t>(yin(rng));
      }
      e.p = pol(rng) ? 1 : -1;
      inst.slice.events.push_back(e);
    }

    inst.flows = FlowSequence::zeros(W, H, 0, window_us, B);
    std::uniform_real_distribution<double> fv(-p.max_flow, p.max_flow);
    for (FlowField& f : inst.flows.fields)
      for (std::size_t i = 0; i < f.u.size(); ++i) {
        f.u[i] = fv(rng);
        f.v[i] = fv(rng);
      }

    if (instance_margins_ok(inst, p, &inst.n_masked)) return inst;
    if (attempt > 5000)
      throw Error("random_fd_instance: rejection sampling stalled");
  }
}

struct FdCheck {
  double max_rel_err = 0.0;   // max-norm relative disagreement
  double max_abs_grad = 0.0;  // scale of the analytic gradient
};

// Central finite differences over every flow cell vs. the analytic gradient.
// Relative error is max |analytic - fd| / max(||analytic||_inf, ||fd||_inf).
inline FdCheck fd_check_flow_gradient(const EventSlice& slice,
                                      FlowSequence flows,
                                      const EngineOptions& opts = {},
                                      double h = 1e-4) {
  const Engine engine(opts);
  const auto [fwd, bwd] = engine.loss_and_grad(slice, flows);
  double max_diff = 0.0, norm_a = 0.0, norm_f = 0.0;
  for (int b = 0; b < flows.n_bins(); ++b) {
    for (int ch = 0; ch < 2; ++ch) {
      Image<double>& field = ch == 0 ? flows.fields[static_cast<std::size_t>(b)].u
                                           : flows.fields[static_cast<std::size_t>(b)].v;
      const Image<double>& g = ch == 0 ? bwd.grad.gu[static_cast<std::size_t>(b)]
                                             : bwd.grad.gv[static_cast<std::size_t>(b)];
      for (std::size_t i = 0; i < field.size(); ++i) {
        const double saved = field[i];
        field[i] = saved + h;
        const double lp = engine.forward(slice, flows).loss.value;
        field[i] = saved - h;
        const double lm = engine.forward(slice, flows).loss.value;
        field[i] = saved;
        const double fd = (lp - lm) / (2.0 * h);
        max_diff = std::max(max_diff, std::abs(g[i] - fd));
        norm_a = std::max(norm_a, std::abs(g[i]));
        norm_f = std::max(norm_f, std::abs(fd));
      }
    }
  }
  FdCheck res;
  res.max_abs_grad = norm_a;
  res.max_rel_err = max_diff / std::max({norm_a, norm_f, 1e-12});
  return res;
}

}  // namespace evcm
