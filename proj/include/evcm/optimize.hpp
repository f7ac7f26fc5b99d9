#pragma once
// Self-supervised optimization loop: Adam over the predictor's depth and pose
// parameters (or over a raw per-bin flow field), driven by the contrast loss
// plus the weighted depth-consistency loss, with per-update logging, a
// divergence guard, and an optional finite-difference spot check.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "evcm/engine.hpp"
#include "evcm/geometry.hpp"
#include "evcm/io.hpp"
#include "evcm/predictor.hpp"
#include "evcm/types.hpp"

namespace evcm {

struct OptimizerConfig {
  double learning_rate = 1e-4;
  int steps_per_update = 10;  // forward bins accumulated per backward pass
  int bins = 10;              // window length in flow bins
  int max_updates = 100;
  double lambda_geo = kGeoWeightDefault;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string backend = "parallel";
  std::uint64_t seed = 1;
  int fd_check_every = 0;          // 0 = off; N = spot-check every Nth update
  double fd_check_tolerance = 0.05;
  double divergence_factor = 10.0;
  // Stop once the gradient's max-norm falls below this: the objective is flat
  // to numerical precision and further steps would only chase rounding noise.
  double grad_stop_tolerance = 1e-10;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("optimizer: learning_rate must be positive");
    if (steps_per_update < 1) throw ConfigError("optimizer: steps_per_update must be >= 1");
    if (bins < 1) throw ConfigError("optimizer: bins must be >= 1");
    if (max_updates < 0) throw ConfigError("optimizer: max_updates must be >= 0");
    if (!(lambda_geo >= 0.0) || !std::isfinite(lambda_geo))
      throw ConfigError("optimizer: lambda_geo must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
        !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("optimizer: adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("optimizer: adam_eps must be positive");
    if (fd_check_every < 0) throw ConfigError("optimizer: fd_check_every must be >= 0");
    if (!(divergence_factor > 1.0))
      throw ConfigError("optimizer: divergence_factor must exceed 1");
    if (!(grad_stop_tolerance >= 0.0))
      throw ConfigError("optimizer: grad_stop_tolerance must be >= 0");
    backend_from_name(backend);  // throws on unknown names
  }

  EngineOptions engine_options() const {
    EngineOptions o;
    o.backend = backend_from_name(backend);
    return o;
  }

  // Low-rate profile for continual on-device style runs.
  static OptimizerConfig online() {
    OptimizerConfig c;
    c.learning_rate = 1e-5;
    return c;
  }
};

struct TrainRecord {
  int update = 0;
  double l_cm = 0.0;
  double l_geo = 0.0;
  double total = 0.0;
  double rsat = 0.0;
  double grad_norm_depth = 0.0;  // flow-field gradient norm in flow-only runs
  double grad_norm_pose = 0.0;
  double wall_ms = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  // Timings are opt-in so that default logs are bit-reproducible.
  void write_csv(const std::filesystem::path& path, bool include_timings = false) const {
    std::vector<std::string> cols{"update",         "l_cm",           "l_geo",
                                  "total",          "rsat",           "grad_norm_depth",
                                  "grad_norm_pose"};
    if (include_timings) cols.push_back("wall_ms");
    CsvWriter csv(path, cols);
    for (const TrainRecord& r : records) {
      std::vector<std::string> row{std::to_string(r.update),
                                   format_number(r.l_cm),
                                   format_number(r.l_geo),
                                   format_number(r.total),
                                   format_number(r.rsat),
                                   format_number(r.grad_norm_depth),
                                   format_number(r.grad_norm_pose)};
      if (include_timings) row.push_back(format_number(r.wall_ms));
      csv.write_row(row);
    }
    csv.flush();
  }
};

// First-order moment-tracking updates; state persists across the whole run so
// warm-started windows continue one optimization trajectory.
class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(const std::vector<double*>& slots, const std::vector<double>& grads,
            const OptimizerConfig& cfg) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t_);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t_);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      m_[i] = cfg.adam_beta1 * m_[i] + (1.0 - cfg.adam_beta1) * grads[i];
      v_[i] = cfg.adam_beta2 * v_[i] + (1.0 - cfg.adam_beta2) * grads[i] * grads[i];
      *slots[i] -= cfg.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg.adam_eps);
    }
  }

 private:
  int t_ = 0;
  std::vector<double> m_, v_;
};

namespace detail {

inline std::vector<double*> predictor_slots(DirectPredictor& p) {
  std::vector<double*> s;
  s.reserve(p.n_parameters());
  for (std::size_t i = 0; i < p.depth_params.size(); ++i) s.push_back(&p.depth_params[i]);
  for (PoseStep& pose : p.poses) {
    s.push_back(&pose.omega.x);
    s.push_back(&pose.omega.y);
    s.push_back(&pose.omega.z);
    s.push_back(&pose.trans.x);
    s.push_back(&pose.trans.y);
    s.push_back(&pose.trans.z);
  }
  return s;
}

inline std::vector<double> flatten(const PredictorGrads& g) {
  std::vector<double> f;
  f.reserve(g.d_depth_params.size() + 6 * g.d_poses.size());
  for (std::size_t i = 0; i < g.d_depth_params.size(); ++i)
    f.push_back(g.d_depth_params[i]);
  for (const PoseGrad& p : g.d_poses) {
    f.push_back(p.omega.x);
    f.push_back(p.omega.y);
    f.push_back(p.omega.z);
    f.push_back(p.trans.x);
    f.push_back(p.trans.y);
    f.push_back(p.trans.z);
  }
  return f;
}

inline double norm2(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

}  // namespace detail

// Contrast loss of the window under the predictor's decoded flows, plus the
// weighted per-bin depth self-consistency term.
inline double predictor_total_loss(const DirectPredictor& pred, const EventSlice& slice,
                                   const CameraIntrinsics& k, double lambda_geo,
                                   const Engine& engine) {
  const DecodedPredictor dec = decode(pred);
  const GeometryFlows geo = depth_pose_to_flows(dec.depth, dec.poses, k,
                                                slice.t_start_us, slice.t_end_us);
  double total = engine.forward(slice, geo.flows).loss.value;
  if (lambda_geo > 0.0) {
    double s = 0.0;
    for (const PoseStep& p : dec.poses)
      s += geometry_consistency_loss(dec.depth, dec.depth, p, k).value;
    total += lambda_geo * s / static_cast<double>(dec.poses.size());
  }
  return total;
}

struct WindowGradients {
  PredictorGrads grads;
  double l_cm = 0.0;
  double l_geo = 0.0;
  double total = 0.0;
};

// One full forward + analytic backward over a window: contrast gradients flow
// through the depth->flow geometry, the depth-consistency gradients add on
// directly, and both chain back through upsampling and softplus.
inline WindowGradients predictor_loss_and_gradients(const DirectPredictor& pred,
                                                    const EventSlice& slice,
                                                    const CameraIntrinsics& k,
                                                    double lambda_geo,
                                                    const Engine& engine) {
  const DecodedPredictor dec = decode(pred);
  const GeometryFlows geo = depth_pose_to_flows(dec.depth, dec.poses, k,
                                                slice.t_start_us, slice.t_end_us);
  const ForwardResult fwd = engine.forward(slice, geo.flows);
  WindowGradients out;
  out.l_cm = fwd.loss.value;
  const GradientBuffer flow_grads = engine.backward(slice, geo.flows, fwd).grad;
  Image<double> extra_depth;
  std::vector<PoseGrad> extra_poses;
  if (lambda_geo > 0.0) {
    extra_depth = Image<double>(dec.depth.width(), dec.depth.height(), 0.0);
    extra_poses.resize(dec.poses.size());
    const double upstream = lambda_geo / static_cast<double>(dec.poses.size());
    double geo_sum = 0.0;
    for (std::size_t i = 0; i < dec.poses.size(); ++i) {
      const GeoLossGrad g = geometry_consistency_loss_backward(dec.depth, dec.depth,
                                                               dec.poses[i], k, upstream);
      geo_sum += g.terms.value;
      // Both views are the same decoded depth, so both halves land on it.
      for (std::size_t j = 0; j < extra_depth.size(); ++j)
        extra_depth[j] += g.d_d0[j] + g.d_d1[j];
      extra_poses[i].omega = g.d_omega;
      extra_poses[i].trans = g.d_trans;
    }
    out.l_geo = geo_sum / static_cast<double>(dec.poses.size());
  }
  out.total = out.l_cm + lambda_geo * out.l_geo;
  out.grads = accumulate_gradients(pred, dec.depth, k, geo.flows, flow_grads,
                                   lambda_geo > 0.0 ? &extra_depth : nullptr,
                                   lambda_geo > 0.0 ? &extra_poses : nullptr);
  return out;
}

namespace detail {

// Central-difference validation of a few randomly chosen parameter gradients.
// Throws if the analytic value disagrees beyond the configured tolerance.
inline void spot_check_predictor_gradients(const DirectPredictor& pred,
                                           const EventSlice& slice,
                                           const CameraIntrinsics& k,
                                           const OptimizerConfig& cfg,
                                           const Engine& engine,
                                           const std::vector<double>& analytic,
                                           int update) {
  DirectPredictor probe = pred;
  std::vector<double*> slots = predictor_slots(probe);
  std::mt19937_64 rng(cfg.seed * 31ull + static_cast<std::uint64_t>(update));
  std::uniform_int_distribution<std::size_t> pick(0, slots.size() - 1);
  const std::size_t n_depth = pred.depth_params.size();
  for (int s = 0; s < 3; ++s) {
    const std::size_t i = pick(rng);
    const double h = i < n_depth ? 1e-5 : 1e-6;
    const double saved = *slots[i];
    *slots[i] = saved + h;
    const double lp = predictor_total_loss(probe, slice, k, cfg.lambda_geo, engine);
    *slots[i] = saved - h;
    const double lm = predictor_total_loss(probe, slice, k, cfg.lambda_geo, engine);
    *slots[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double scale = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
    if (std::abs(analytic[i] - fd) > cfg.fd_check_tolerance * scale)
      throw Error("gradient spot check failed at update " + std::to_string(update) +
                  ", parameter " + std::to_string(i) + ": analytic " +
                  format_number(analytic[i]) + " vs finite difference " +
                  format_number(fd));
  }
}

inline double window_zero_flow_loss(const EventSlice& slice, int bins,
                                    const Engine& engine) {
  const FlowSequence zero = FlowSequence::zeros(slice.width, slice.height,
                                                slice.t_start_us, slice.t_end_us, bins);
  const LossResult base = engine.forward(slice, zero).loss;
  return (base.no_survivors || !(base.value > 0.0)) ? 0.0 : base.value;
}

}  // namespace detail

struct RunResult {
  DirectPredictor predictor;
  TrainLog log;
};

// Sequential pass over the provided windows: the stream advances one window
// after every bins/steps_per_update updates, and once exhausted the final
// window keeps receiving updates until the budget runs out. Warm starting is
// implicit: parameters and Adam state carry across windows.
inline RunResult run_window(const std::vector<EventSlice>& windows, DirectPredictor pred,
                            const CameraIntrinsics& k, const OptimizerConfig& cfg) {
  cfg.validate();
  pred.validate();
  if (static_cast<int>(pred.poses.size()) != cfg.bins)
    throw ConfigError("optimizer: predictor must carry exactly one pose per bin");

  std::vector<const EventSlice*> live;
  for (const EventSlice& w : windows) {
    if (w.events.empty()) continue;  // nothing to learn from; never triggers an update
    w.validate();
    if (w.width != pred.full_width() || w.height != pred.full_height())
      throw DimensionMismatchError("optimizer: window resolution must match the predictor");
    live.push_back(&w);
  }

  RunResult out;
  if (live.empty() || cfg.max_updates == 0) {
    out.predictor = std::move(pred);
    return out;
  }

  const Engine engine(cfg.engine_options());
  Adam adam(pred.n_parameters());
  const int updates_per_window = std::max(1, cfg.bins / cfg.steps_per_update);
  std::size_t window_index = 0;
  int spent_on_window = 0;
  double zero_loss = detail::window_zero_flow_loss(*live[0], cfg.bins, engine);
  double initial_total = 0.0;

  for (int u = 0; u < cfg.max_updates; ++u) {
    if (spent_on_window >= updates_per_window && window_index + 1 < live.size()) {
      ++window_index;
      spent_on_window = 0;
      zero_loss = detail::window_zero_flow_loss(*live[window_index], cfg.bins, engine);
    }
    const EventSlice& slice = *live[window_index];

    const auto t0 = std::chrono::steady_clock::now();
    const WindowGradients wg =
        predictor_loss_and_gradients(pred, slice, k, cfg.lambda_geo, engine);
    if (!std::isfinite(wg.total))
      throw DivergenceError("optimizer: non-finite loss at update " + std::to_string(u));
    if (u == 0)
      initial_total = wg.total;
    else if (initial_total > 0.0 && wg.total > cfg.divergence_factor * initial_total)
      throw DivergenceError("optimizer: loss " + format_number(wg.total) + " exceeds " +
                            format_number(cfg.divergence_factor) + "x initial " +
                            format_number(initial_total) + " at update " +
                            std::to_string(u));

    const std::vector<double> flat = detail::flatten(wg.grads);
    double grad_inf = 0.0;
    for (double g : flat) grad_inf = std::max(grad_inf, std::abs(g));
    if (grad_inf < cfg.grad_stop_tolerance) break;  // converged to machine precision
    if (cfg.fd_check_every > 0 && u % cfg.fd_check_every == 0)
      detail::spot_check_predictor_gradients(pred, slice, k, cfg, engine, flat, u);

    std::vector<double*> slots = detail::predictor_slots(pred);
    adam.step(slots, flat, cfg);
    const auto t1 = std::chrono::steady_clock::now();

    TrainRecord r;
    r.update = u;
    r.l_cm = wg.l_cm;
    r.l_geo = wg.l_geo;
    r.total = wg.total;
    r.rsat = zero_loss > 0.0 ? wg.l_cm / zero_loss : 1.0;
    const std::size_t n_depth = pred.depth_params.size();
    r.grad_norm_depth = detail::norm2(flat, 0, n_depth);
    r.grad_norm_pose = detail::norm2(flat, n_depth, flat.size());
    r.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.log.records.push_back(r);
    ++spent_on_window;
  }

  out.predictor = std::move(pred);
  return out;
}

struct FlowOnlyResult {
  FlowSequence flows;
  TrainLog log;
};

// Direct contrast-only optimization of a dense per-bin flow field, starting
// from zero flow. Returns the best iterate seen, so the result can never score
// worse than the zero-flow baseline.
inline FlowOnlyResult optimize_flow_only(const EventSlice& slice, int n_bins,
                                         const OptimizerConfig& cfg) {
  cfg.validate();
  if (slice.events.empty())
    throw EmptySliceError("flow optimization: slice has no events");
  slice.validate();

  FlowSequence flows = FlowSequence::zeros(slice.width, slice.height, slice.t_start_us,
                                           slice.t_end_us, n_bins);
  const Engine engine(cfg.engine_options());
  const std::size_t cells = flows.fields.front().u.size();
  Adam adam(2 * static_cast<std::size_t>(n_bins) * cells);

  std::vector<double*> slots;
  slots.reserve(2 * static_cast<std::size_t>(n_bins) * cells);
  for (FlowField& f : flows.fields) {
    for (std::size_t i = 0; i < f.u.size(); ++i) slots.push_back(&f.u[i]);
    for (std::size_t i = 0; i < f.v.size(); ++i) slots.push_back(&f.v[i]);
  }

  FlowOnlyResult out;
  out.flows = flows;  // zero-flow iterate is the starting best
  double best_loss = std::numeric_limits<double>::infinity();
  double zero_loss = 0.0;
  double initial_total = 0.0;

  for (int u = 0; u < cfg.max_updates; ++u) {
    const auto t0 = std::chrono::steady_clock::now();
    const ForwardResult fwd = engine.forward(slice, flows);
    const double loss = fwd.loss.value;
    if (!std::isfinite(loss))
      throw DivergenceError("flow optimization: non-finite loss at update " +
                            std::to_string(u));
    if (u == 0) {
      initial_total = loss;
      zero_loss = fwd.loss.no_survivors || !(loss > 0.0) ? 0.0 : loss;
    } else if (initial_total > 0.0 && loss > cfg.divergence_factor * initial_total) {
      throw DivergenceError("flow optimization: loss " + format_number(loss) +
                            " exceeds " + format_number(cfg.divergence_factor) +
                            "x initial " + format_number(initial_total) +
                            " at update " + std::to_string(u));
    }
    if (loss < best_loss) {
      best_loss = loss;
      out.flows = flows;
    }

    const GradientBuffer grad = engine.backward(slice, flows, fwd).grad;
    std::vector<double> flat;
    flat.reserve(slots.size());
    for (int b = 0; b < n_bins; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      for (std::size_t i = 0; i < grad.gu[bi].size(); ++i) flat.push_back(grad.gu[bi][i]);
      for (std::size_t i = 0; i < grad.gv[bi].size(); ++i) flat.push_back(grad.gv[bi][i]);
    }
    double grad_inf = 0.0;
    for (double g : flat) grad_inf = std::max(grad_inf, std::abs(g));
    if (grad_inf < cfg.grad_stop_tolerance) break;  // converged to machine precision

    if (cfg.fd_check_every > 0 && u % cfg.fd_check_every == 0) {
      std::mt19937_64 rng(cfg.seed * 31ull + static_cast<std::uint64_t>(u));
      std::uniform_int_distribution<std::size_t> pick(0, slots.size() - 1);
      for (int s = 0; s < 3; ++s) {
        const std::size_t i = pick(rng);
        const double h = 1e-4;
        const double saved = *slots[i];
        *slots[i] = saved + h;
        const double lp = engine.forward(slice, flows).loss.value;
        *slots[i] = saved - h;
        const double lm = engine.forward(slice, flows).loss.value;
        *slots[i] = saved;
        const double fd = (lp - lm) / (2.0 * h);
        const double scale = std::max({1.0, std::abs(fd), std::abs(flat[i])});
        if (std::abs(flat[i] - fd) > cfg.fd_check_tolerance * scale)
          throw Error("gradient spot check failed at update " + std::to_string(u) +
                      ", flow cell " + std::to_string(i) + ": analytic " +
                      format_number(flat[i]) + " vs finite difference " +
                      format_number(fd));
      }
    }

    adam.step(slots, flat, cfg);
    const auto t1 = std::chrono::steady_clock::now();

    TrainRecord r;
    r.update = u;
    r.l_cm = loss;
    r.l_geo = 0.0;
    r.total = loss;
    r.rsat = zero_loss > 0.0 ? loss / zero_loss : 1.0;
    r.grad_norm_depth = detail::norm2(flat, 0, flat.size());
    r.grad_norm_pose = 0.0;
    r.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.log.records.push_back(r);
  }

  // The loop logs pre-step losses only; the final iterate still deserves a look.
  if (cfg.max_updates > 0) {
    const double last = engine.forward(slice, flows).loss.value;
    if (std::isfinite(last) && last < best_loss) out.flows = flows;
  }
  return out;
}

}  // namespace evcm
