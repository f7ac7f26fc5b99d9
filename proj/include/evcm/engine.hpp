#pragma once
// Interchangeable execution backends for the warp/splat/loss/backward
// pipeline:
//  - naive: one event at a time through a boxed per-event callable with a
//    fresh scratch allocation per event — an interpreter-style baseline.
//  - padded: fixed-size batches, zero-padded to the batch size; padding lanes
//    run the full arithmetic with lane weight 0, and the forward pass records
//    an activation tape (interpolation fractions, step Jacobians) that the
//    backward pass consumes instead of recomputing.
//  - parallel: a worker pool partitions events (and reference times during
//    splatting); gradient accumulation is per-worker with an ordered merge in
//    deterministic mode, or shared atomic adds in fast mode.
//
// All three produce bit-identical forward stacks and losses: per pixel, mass
// is accumulated in event order regardless of the backend, and zero-weight
// lanes add exact zeros. Gradients agree to rounding (merge association
// differs across worker counts) and are run-to-run bit-stable in
// deterministic mode for a fixed configuration.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "evcm/memtrack.hpp"
#include "evcm/thread_pool.hpp"
#include "evcm/types.hpp"
#include "evcm/warp.hpp"

namespace evcm {

enum class Backend { naive, padded, parallel };

inline Backend backend_from_name(const std::string& name) {
  if (name == "naive") return Backend::naive;
  if (name == "padded") return Backend::padded;
  if (name == "parallel") return Backend::parallel;
  throw ConfigError("unknown backend '" + name + "' (naive|padded|parallel)");
}

inline const char* backend_name(Backend b) {
  switch (b) {
    case Backend::naive: return "naive";
    case Backend::padded: return "padded";
    default: return "parallel";
  }
}

struct EngineOptions {
  Backend backend = Backend::parallel;
  int n_workers = 0;                    // 0 = hardware_concurrency()
  int batch_size = 256;                 // padded backend lane count
  double padding_fraction = 0.0;        // extra padded lanes per real event
  std::size_t min_events_per_worker = 4096;  // soft cap on worker fan-out
  bool deterministic = true;            // ordered gradient merge when parallel
};

struct PhaseStats {
  double time_us = 0.0;
  std::size_t peak_bytes = 0;
};

// Forward activations saved by the padded backend, one slot per lane.
struct PaddedTape {
  std::size_t n_slots = 0;
  int n_refs = 0;
  int n_bins = 0;
  mem::TrackedVector<double> frac;    // [slot][ref][2]  splat wx, wy
  mem::TrackedVector<double> jac;     // [slot][bin][4]  full-step flow Jacobian
  mem::TrackedVector<double> lane_w;  // [slot]          1 = real event, 0 = padding

  void resize(std::size_t slots, int refs, int bins) {
    n_slots = slots;
    n_refs = refs;
    n_bins = bins;
    frac.assign(slots * static_cast<std::size_t>(refs) * 2, 0.0);
    jac.assign(slots * static_cast<std::size_t>(bins) * 4, 0.0);
    lane_w.assign(slots, 0.0);
  }
  double* frac_row(std::size_t s) {
    return frac.data() + s * static_cast<std::size_t>(n_refs) * 2;
  }
  const double* frac_row(std::size_t s) const {
    return frac.data() + s * static_cast<std::size_t>(n_refs) * 2;
  }
  double* jac_row(std::size_t s) {
    return jac.data() + s * static_cast<std::size_t>(n_bins) * 4;
  }
  const double* jac_row(std::size_t s) const {
    return jac.data() + s * static_cast<std::size_t>(n_bins) * 4;
  }
};

struct ForwardResult {
  IweStack stack;
  Trajectories traj;
  PaddedTape tape;  // nonempty only for the padded backend
  LossResult loss;
  PhaseStats warp_stats, splat_stats, loss_stats;
};

struct BackwardResult {
  GradientBuffer grad;
  PhaseStats stats;
};

// Distributes into a shared buffer with atomic adds (fast, non-bit-stable).
struct AtomicGradSink {
  GradientBuffer* buf;

  void add(int bin, Vec2 at, Vec2 g) {
    Image<double>& gu = buf->gu[static_cast<std::size_t>(bin)];
    Image<double>& gv = buf->gv[static_cast<std::size_t>(bin)];
    const BilinCell c = bilin_cell(at.x, at.y, gu.width(), gu.height());
    const auto acc = [](double& slot, double v) {
      std::atomic_ref<double>(slot).fetch_add(v, std::memory_order_relaxed);
    };
    acc(gu.at(c.x0, c.y0), c.w00() * g.x);
    acc(gu.at(c.x1, c.y0), c.w10() * g.x);
    acc(gu.at(c.x0, c.y1), c.w01() * g.x);
    acc(gu.at(c.x1, c.y1), c.w11() * g.x);
    acc(gv.at(c.x0, c.y0), c.w00() * g.y);
    acc(gv.at(c.x1, c.y0), c.w10() * g.y);
    acc(gv.at(c.x0, c.y1), c.w01() * g.y);
    acc(gv.at(c.x1, c.y1), c.w11() * g.y);
  }
};

class Engine {
 public:
  explicit Engine(EngineOptions opts = {}) : opts_(opts) {
    if (opts_.batch_size < 1) throw ConfigError("engine: batch_size must be >= 1");
    if (opts_.padding_fraction < 0.0)
      throw ConfigError("engine: padding_fraction must be >= 0");
    if (opts_.n_workers < 0) throw ConfigError("engine: n_workers must be >= 0");
  }

  const EngineOptions& options() const { return opts_; }

  ForwardResult forward(const EventSlice& slice, const FlowSequence& flows) const {
    validate_window(slice, flows);
    ForwardResult res;
    const int B = flows.n_bins();
    const int n_refs = B + 1;
    const std::size_t n = slice.events.size();
    const mem::TrackedVector<double> edges = edge_seconds(flows);

    {  // ---- warp phase: trajectories for every event --------------------
      const Timer timer(&res.warp_stats);
      res.traj.resize(n, n_refs);
      switch (opts_.backend) {
        case Backend::naive: warp_naive(slice, flows, edges.data(), B, res.traj); break;
        case Backend::padded:
          warp_padded(slice, flows, edges.data(), B, res.traj, res.tape);
          break;
        case Backend::parallel: warp_parallel(slice, flows, edges.data(), B, res.traj); break;
      }
      std::size_t alive = 0;
      for (std::size_t k = 0; k < n; ++k) alive += res.traj.alive[k];
      res.traj.n_alive = alive;
    }

    {  // ---- splat phase: accumulate the per-reference images -------------
      const Timer timer(&res.splat_stats);
      res.stack = IweStack(slice.width, slice.height, n_refs);
      switch (opts_.backend) {
        case Backend::naive: splat_naive(slice, edges.data(), res.traj, res.stack); break;
        case Backend::padded: splat_padded(slice, edges.data(), res.traj, res.tape, res.stack); break;
        case Backend::parallel: splat_parallel(slice, edges.data(), res.traj, res.stack); break;
      }
    }

    {  // ---- loss phase: per-reference reduction ---------------------------
      const Timer timer(&res.loss_stats);
      res.loss = reduce_loss(res.stack);
    }
    return res;
  }

  BackwardResult backward(const EventSlice& slice, const FlowSequence& flows,
                          const ForwardResult& fwd) const {
    validate_window(slice, flows);
    BackwardResult res;
    const int B = flows.n_bins();
    const mem::TrackedVector<double> edges = edge_seconds(flows);
    if (opts_.backend == Backend::padded && fwd.tape.n_slots == 0 &&
        !slice.events.empty())
      throw ConfigError("engine: padded backward needs a padded forward (tape missing)");
    const Timer timer(&res.stats);
    res.grad = GradientBuffer(slice.width, slice.height, B);
    if (fwd.loss.no_survivors) return res;
    switch (opts_.backend) {
      case Backend::naive: backward_naive(slice, flows, edges.data(), B, fwd, res.grad); break;
      case Backend::padded: backward_padded(slice, edges.data(), B, fwd, res.grad); break;
      case Backend::parallel:
        backward_parallel(slice, flows, edges.data(), B, fwd, res.grad);
        break;
    }
    return res;
  }

  // Convenience wrapper: forward followed by backward.
  std::pair<ForwardResult, BackwardResult> loss_and_grad(const EventSlice& slice,
                                                         const FlowSequence& flows) const {
    ForwardResult f = forward(slice, flows);
    BackwardResult b = backward(slice, flows, f);
    return {std::move(f), std::move(b)};
  }

  static void validate_window(const EventSlice& slice, const FlowSequence& flows) {
    slice.validate();
    flows.validate();
    if (flows.width() != slice.width || flows.height() != slice.height)
      throw DimensionMismatchError("engine: flow shape differs from sensor shape");
    if (flows.t_start_us() != slice.t_start_us || flows.t_end_us() != slice.t_end_us)
      throw ConfigError("engine: flow bin edges do not span the slice window");
  }

 private:
  // RAII wall-clock + peak-allocation probe for one phase.
  class Timer {
   public:
    explicit Timer(PhaseStats* out)
        : out_(out), start_(std::chrono::steady_clock::now()) {}
    ~Timer() {
      scope_.stop();
      out_->time_us = std::chrono::duration<double, std::micro>(
                          std::chrono::steady_clock::now() - start_)
                          .count();
      out_->peak_bytes = scope_.peak_delta();
    }

   private:
    PhaseStats* out_;
    std::chrono::steady_clock::time_point start_;
    mem::PhaseScope scope_;
  };

  static mem::TrackedVector<double> edge_seconds(const FlowSequence& flows) {
    mem::TrackedVector<double> edges(flows.edges_us.size());
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = flows.edge_rel_s(static_cast<int>(i));
    return edges;
  }

  int resolve_workers(std::size_t n_items) const {
    int base = opts_.n_workers;
    if (base == 0) base = static_cast<int>(std::thread::hardware_concurrency());
    if (base < 1) base = 1;
    const std::size_t per = std::max<std::size_t>(opts_.min_events_per_worker, 1);
    const std::size_t cap = std::max<std::size_t>(n_items / per, 1);
    return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(base), cap));
  }

  // Normalized timestamp distance between the event and reference r.
  static double tbar(double t_rel, double edge_rel, double window_s) {
    return std::abs(t_rel - edge_rel) / window_s;
  }

  // ---- warp phase -----------------------------------------------------------

  static void warp_one(const Event& e, const FlowSequence& flows, const double* edges,
                       int B, int width, int height, double t0_us, Trajectories& traj,
                       std::size_t k, Vec2* row) {
    const double t_rel = (static_cast<double>(e.t_us) - t0_us) * 1e-6;
    const int j = bin_of(t_rel, edges, B);
    const bool ok = build_trajectory({static_cast<double>(e.x), static_cast<double>(e.y)},
                                     t_rel, j, flows, edges, B, width, height, row);
    traj.alive[k] = ok ? 1 : 0;
    traj.bin[k] = j;
  }

  void warp_naive(const EventSlice& slice, const FlowSequence& flows, const double* edges,
                  int B, Trajectories& traj) const {
    const double t0 = static_cast<double>(slice.t_start_us);
    for (std::size_t k = 0; k < slice.events.size(); ++k) {
      // Boxed call + fresh scratch per event: the per-event dispatch baseline.
      const std::function<void()> op = [&, k] {
        mem::TrackedVector<Vec2> scratch(static_cast<std::size_t>(B) + 1);
        warp_one(slice.events[k], flows, edges, B, slice.width, slice.height, t0, traj, k,
                 scratch.data());
        Vec2* row = traj.row(k);
        for (int r = 0; r <= B; ++r) row[r] = scratch[static_cast<std::size_t>(r)];
      };
      op();
    }
  }

  void warp_padded(const EventSlice& slice, const FlowSequence& flows, const double* edges,
                   int B, Trajectories& traj, PaddedTape& tape) const {
    const std::size_t n = slice.events.size();
    const std::size_t batch = static_cast<std::size_t>(opts_.batch_size);
    const std::size_t target =
        n + static_cast<std::size_t>(std::ceil(opts_.padding_fraction * static_cast<double>(n)));
    const std::size_t n_slots = std::max<std::size_t>((target + batch - 1) / batch, 1) * batch;
    tape.resize(n_slots, B + 1, B);
    const double t0 = static_cast<double>(slice.t_start_us);
    mem::TrackedVector<Vec2> pad_row(static_cast<std::size_t>(B) + 1);

    Event dummy;  // lane filler; full arithmetic runs on it with weight 0
    dummy.t_us = slice.t_start_us;

    for (std::size_t s0 = 0; s0 < n_slots; s0 += batch) {
      for (std::size_t s = s0; s < s0 + batch; ++s) {
        const bool real = s < n;
        const Event& e = real ? slice.events[s] : dummy;
        Vec2* row = real ? traj.row(s) : pad_row.data();
        const double t_rel = (static_cast<double>(e.t_us) - t0) * 1e-6;
        const int j = bin_of(t_rel, edges, B);
        const Vec2 x0{static_cast<double>(e.x), static_cast<double>(e.y)};
        const bool ok =
            build_trajectory(x0, t_rel, j, flows, edges, B, slice.width, slice.height, row);
        if (real) {
          traj.alive[s] = ok ? 1 : 0;
          traj.bin[s] = j;
        }
        tape.lane_w[s] = (real && ok) ? 1.0 : 0.0;
        // Record interpolation fractions at every reference and the Jacobian
        // of every full step; the backward pass replays from this tape.
        double* frac = tape.frac_row(s);
        for (int r = 0; r <= B; ++r) {
          const BilinCell c = bilin_cell(row[r].x, row[r].y, slice.width, slice.height);
          frac[2 * r] = c.wx;
          frac[2 * r + 1] = c.wy;
        }
        double* jrow = tape.jac_row(s);
        for (int i = 0; i <= j - 1; ++i) {
          const Mat2 m = sample_flow_jacobian(flows.fields[static_cast<std::size_t>(i)],
                                              row[i + 1]);
          jrow[4 * i] = m.dux;
          jrow[4 * i + 1] = m.duy;
          jrow[4 * i + 2] = m.dvx;
          jrow[4 * i + 3] = m.dvy;
        }
        for (int i = j + 1; i <= B - 1; ++i) {
          const Mat2 m = sample_flow_jacobian(flows.fields[static_cast<std::size_t>(i)], row[i]);
          jrow[4 * i] = m.dux;
          jrow[4 * i + 1] = m.duy;
          jrow[4 * i + 2] = m.dvx;
          jrow[4 * i + 3] = m.dvy;
        }
      }
    }
  }

  void warp_parallel(const EventSlice& slice, const FlowSequence& flows, const double* edges,
                     int B, Trajectories& traj) const {
    const std::size_t n = slice.events.size();
    const int workers = resolve_workers(n);
    const double t0 = static_cast<double>(slice.t_start_us);
    parallel_chunks(n, workers, [&](int, std::size_t begin, std::size_t end) {
      for (std::size_t k = begin; k < end; ++k)
        warp_one(slice.events[k], flows, edges, B, slice.width, slice.height, t0, traj, k,
                 traj.row(k));
    });
  }

  // ---- splat phase ----------------------------------------------------------

  static void splat_event_refs(const Event& e, const Vec2* row, double t_rel,
                               const double* edges, double window_s, IweStack& stack,
                               int r_begin, int r_end, double weight) {
    const int c = polarity_index(e.p);
    for (int r = r_begin; r < r_end; ++r) {
      const double tb = std::abs(t_rel - edges[r]) / window_s;
      splat_bilinear(row[r], weight, tb, stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)],
                     stack.tsum[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
    }
  }

  void splat_naive(const EventSlice& slice, const double* edges, const Trajectories& traj,
                   IweStack& stack) const {
    const int B = stack.n_refs - 1;
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    for (std::size_t k = 0; k < slice.events.size(); ++k) {
      const std::function<void()> op = [&, k] {
        if (!traj.alive[k]) return;  // masked: contributes to no reference
        const double t_rel = (static_cast<double>(slice.events[k].t_us) - t0) * 1e-6;
        splat_event_refs(slice.events[k], traj.row(k), t_rel, edges, window_s, stack, 0,
                         B + 1, 1.0);
      };
      op();
    }
    for (int r = 0; r < stack.n_refs; ++r) stack.refresh_active(r);
  }

  void splat_padded(const EventSlice& slice, const double* edges, const Trajectories& traj,
                    const PaddedTape& tape, IweStack& stack) const {
    const int B = stack.n_refs - 1;
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    const std::size_t n = slice.events.size();
    Event dummy;
    dummy.t_us = slice.t_start_us;
    mem::TrackedVector<Vec2> zero_row(static_cast<std::size_t>(B) + 1, Vec2{});
    for (std::size_t s = 0; s < tape.n_slots; ++s) {
      // Every lane runs the same arithmetic; padding and masked lanes carry
      // weight 0, which adds exact zeros everywhere.
      const bool real = s < n;
      const Event& e = real ? slice.events[s] : dummy;
      const Vec2* row = real ? traj.row(s) : zero_row.data();
      const double t_rel = (static_cast<double>(e.t_us) - t0) * 1e-6;
      splat_event_refs(e, row, t_rel, edges, window_s, stack, 0, B + 1, tape.lane_w[s]);
    }
    for (int r = 0; r < stack.n_refs; ++r) stack.refresh_active(r);
  }

  void splat_parallel(const EventSlice& slice, const double* edges, const Trajectories& traj,
                      IweStack& stack) const {
    const int B = stack.n_refs - 1;
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    const std::size_t n = slice.events.size();
    // Shard by reference time: each worker owns whole reference images and
    // walks all events in order, so per-pixel accumulation order matches the
    // sequential backends bit for bit.
    const int workers = std::min(resolve_workers(n * static_cast<std::size_t>(B + 1)),
                                 stack.n_refs);
    parallel_chunks(static_cast<std::size_t>(stack.n_refs), workers,
                    [&](int, std::size_t r_begin, std::size_t r_end) {
                      for (std::size_t k = 0; k < n; ++k) {
                        if (!traj.alive[k]) continue;
                        const double t_rel =
                            (static_cast<double>(slice.events[k].t_us) - t0) * 1e-6;
                        splat_event_refs(slice.events[k], traj.row(k), t_rel, edges,
                                         window_s, stack, static_cast<int>(r_begin),
                                         static_cast<int>(r_end), 1.0);
                      }
                      for (std::size_t r = r_begin; r < r_end; ++r)
                        stack.refresh_active(static_cast<int>(r));
                    });
  }

  // ---- loss phase -----------------------------------------------------------

  LossResult reduce_loss(const IweStack& stack) const {
    LossResult res;
    std::int64_t total_active = 0;
    for (int r = 0; r < stack.n_refs; ++r)
      total_active += stack.n_active[static_cast<std::size_t>(r)];
    if (total_active == 0) {
      res.no_survivors = true;
      return res;
    }
    mem::TrackedVector<double> per_ref(static_cast<std::size_t>(stack.n_refs), 0.0);
    const int workers =
        opts_.backend == Backend::parallel
            ? std::min(resolve_workers(static_cast<std::size_t>(stack.n_refs) *
                                       static_cast<std::size_t>(stack.width) *
                                       static_cast<std::size_t>(stack.height)),
                       stack.n_refs)
            : 1;
    parallel_chunks(static_cast<std::size_t>(stack.n_refs), workers,
                    [&](int, std::size_t r_begin, std::size_t r_end) {
                      for (std::size_t r = r_begin; r < r_end; ++r)
                        per_ref[r] = reference_loss(stack, static_cast<int>(r));
                    });
    double sum = 0.0;
    for (int r = 0; r < stack.n_refs; ++r) sum += per_ref[static_cast<std::size_t>(r)];
    res.value = sum / static_cast<double>(stack.n_refs);
    return res;
  }

  // ---- backward phase ---------------------------------------------------------

  // Loss gradient w.r.t. each reference position of one event, then reverse
  // accumulation through the warp legs into `sink`.
  template <typename Sink, typename JacFn>
  static void backward_event(const Event& e, const Vec2* row, double t_rel, int j,
                             const double* edges, int B, double window_s,
                             const IweStack& stack, double lane_w, Sink&& sink,
                             JacFn&& jac_at, mem::TrackedVector<Vec2>& d_scratch) {
    const int c = polarity_index(e.p);
    for (int r = 0; r <= B; ++r) {
      const double tb = std::abs(t_rel - edges[r]) / window_s;
      d_scratch[static_cast<std::size_t>(r)] =
          splat_position_grad(stack, r, c, row[r], tb, lane_w);
    }
    // Backward leg (references j..0), reverse order.
    Vec2 g = d_scratch[0];
    for (int i = 0; i <= j - 1; ++i) {
      const double dt = edges[i] - edges[i + 1];
      sink.add(i, row[i + 1], dt * g);
      g = apply_step_transpose(jac_at(i, row[i + 1]), dt, g);
      g = g + d_scratch[static_cast<std::size_t>(i) + 1];
    }
    const Vec2 x0{static_cast<double>(e.x), static_cast<double>(e.y)};
    sink.add(j, x0, (edges[j] - t_rel) * g);
    // Forward leg (references j+1..B), reverse order.
    g = d_scratch[static_cast<std::size_t>(B)];
    for (int i = B - 1; i >= j + 1; --i) {
      const double dt = edges[i + 1] - edges[i];
      sink.add(i, row[i], dt * g);
      g = apply_step_transpose(jac_at(i, row[i]), dt, g);
      g = g + d_scratch[static_cast<std::size_t>(i)];
    }
    sink.add(j, x0, (edges[j + 1] - t_rel) * g);
  }

  void backward_naive(const EventSlice& slice, const FlowSequence& flows, const double* edges,
                      int B, const ForwardResult& fwd, GradientBuffer& grad) const {
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    BufferGradSink sink{&grad};
    const auto jac_at = [&](int bin, Vec2 at) {
      return sample_flow_jacobian(flows.fields[static_cast<std::size_t>(bin)], at);
    };
    for (std::size_t k = 0; k < slice.events.size(); ++k) {
      const std::function<void()> op = [&, k] {
        if (!fwd.traj.alive[k]) return;
        mem::TrackedVector<Vec2> d(static_cast<std::size_t>(B) + 1);
        const double t_rel = (static_cast<double>(slice.events[k].t_us) - t0) * 1e-6;
        backward_event(slice.events[k], fwd.traj.row(k), t_rel, fwd.traj.bin[k], edges, B,
                       window_s, fwd.stack, 1.0, sink, jac_at, d);
      };
      op();
    }
  }

  void backward_padded(const EventSlice& slice, const double* edges, int B,
                       const ForwardResult& fwd, GradientBuffer& grad) const {
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    const std::size_t n = slice.events.size();
    BufferGradSink sink{&grad};
    Event dummy;
    dummy.t_us = slice.t_start_us;
    mem::TrackedVector<Vec2> zero_row(static_cast<std::size_t>(B) + 1, Vec2{});
    mem::TrackedVector<Vec2> d(static_cast<std::size_t>(B) + 1);
    for (std::size_t s = 0; s < fwd.tape.n_slots; ++s) {
      const bool real = s < n;
      const Event& e = real ? slice.events[s] : dummy;
      const Vec2* row = real ? fwd.traj.row(s) : zero_row.data();
      const int j = real ? fwd.traj.bin[s] : 0;
      const double t_rel = (static_cast<double>(e.t_us) - t0) * 1e-6;
      const double* jrow = fwd.tape.jac_row(s);
      const auto jac_at = [&](int bin, Vec2) {
        return Mat2{jrow[4 * bin], jrow[4 * bin + 1], jrow[4 * bin + 2], jrow[4 * bin + 3]};
      };
      backward_event(e, row, t_rel, j, edges, B, window_s, fwd.stack, fwd.tape.lane_w[s],
                     sink, jac_at, d);
    }
  }

  void backward_parallel(const EventSlice& slice, const FlowSequence& flows,
                         const double* edges, int B, const ForwardResult& fwd,
                         GradientBuffer& grad) const {
    const double t0 = static_cast<double>(slice.t_start_us);
    const double window_s = edges[B];
    const std::size_t n = slice.events.size();
    const int workers = resolve_workers(n);
    const auto jac_at = [&](int bin, Vec2 at) {
      return sample_flow_jacobian(flows.fields[static_cast<std::size_t>(bin)], at);
    };
    const auto run_range = [&](auto& sink, std::size_t begin, std::size_t end) {
      mem::TrackedVector<Vec2> d(static_cast<std::size_t>(B) + 1);
      for (std::size_t k = begin; k < end; ++k) {
        if (!fwd.traj.alive[k]) continue;
        const double t_rel = (static_cast<double>(slice.events[k].t_us) - t0) * 1e-6;
        backward_event(slice.events[k], fwd.traj.row(k), t_rel, fwd.traj.bin[k], edges, B,
                       window_s, fwd.stack, 1.0, sink, jac_at, d);
      }
    };

    if (!opts_.deterministic) {
      // Fast mode: every worker adds straight into the shared buffer.
      parallel_chunks(n, workers, [&](int, std::size_t begin, std::size_t end) {
        AtomicGradSink sink{&grad};
        run_range(sink, begin, end);
      });
      return;
    }
    if (workers <= 1) {
      BufferGradSink sink{&grad};
      run_range(sink, 0, n);
      return;
    }
    // Deterministic mode: worker 0 owns the result buffer, the others fill
    // private buffers that are merged in fixed worker order afterwards.
    std::vector<GradientBuffer> partial(static_cast<std::size_t>(workers) - 1);
    parallel_chunks(n, workers, [&](int w, std::size_t begin, std::size_t end) {
      if (w == 0) {
        BufferGradSink sink{&grad};
        run_range(sink, begin, end);
      } else {
        partial[static_cast<std::size_t>(w) - 1] =
            GradientBuffer(grad.width(), grad.height(), B);
        BufferGradSink sink{&partial[static_cast<std::size_t>(w) - 1]};
        run_range(sink, begin, end);
      }
    });
    for (const GradientBuffer& p : partial) grad.add(p);
  }

  EngineOptions opts_;
};

// ---- module-level convenience operations -------------------------------------

inline ForwardResult build_iwe_stack(const EventSlice& slice, const FlowSequence& flows,
                                     const EngineOptions& opts = {}) {
  return Engine(opts).forward(slice, flows);
}

inline GradientBuffer contrast_loss_backward(const EventSlice& slice,
                                             const FlowSequence& flows,
                                             const EngineOptions& opts = {}) {
  const Engine engine(opts);
  const ForwardResult fwd = engine.forward(slice, flows);
  return engine.backward(slice, flows, fwd).grad;
}

// Ratio of the loss under `flows` to the loss under zero flow; < 1 indicates
// the motion model sharpens the warped images.
inline double rsat(const EventSlice& slice, const FlowSequence& flows,
                   const EngineOptions& opts = {}) {
  if (slice.events.empty()) throw EmptySliceError("rsat: no events in slice");
  const Engine engine(opts);
  const double with_flow = engine.forward(slice, flows).loss.value;
  const FlowSequence zero = flows.zeros_like();
  const LossResult base = engine.forward(slice, zero).loss;
  if (base.no_survivors || base.value == 0.0)
    throw EmptySliceError("rsat: zero-flow loss is zero");
  return with_flow / base.value;
}

}  // namespace evcm
