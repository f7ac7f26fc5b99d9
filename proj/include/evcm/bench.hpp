#pragma once

// Performance harness for the execution backends: times the warp, splat,
// loss-reduce, and backward phases over synthetic event windows of increasing
// size, records each phase's peak additional allocation, and cross-checks
// that every backend computes the same loss.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "evcm/engine.hpp"
#include "evcm/io.hpp"
#include "evcm/types.hpp"

namespace evcm {

// Raised when two backends disagree on the loss beyond tolerance: they must
// implement the same mathematics, so a mismatch is a defect, not noise.
class BackendDisagreementError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kBackendLossTolerance = 1e-10;  // relative

struct BenchConfig {
  std::vector<std::size_t> event_counts = {1000, 10000};
  double padding_fraction = 0.10;  // extra lanes the padded backend processes
  int repetitions = 20;            // timed runs per cell (one warm-up extra)
  std::vector<Backend> backends = {Backend::naive, Backend::padded,
                                   Backend::parallel};
  int width = 64;
  int height = 48;
  int bins = 10;
  double window_s = 0.1;
  int n_workers = 0;  // parallel backend worker count; 0 = hardware
  std::size_t min_events_per_worker = 4096;  // fan-out floor for the pool
  std::uint64_t seed = 1;

  void validate() const {
    if (event_counts.empty()) throw ConfigError("bench: need at least one event count");
    for (std::size_t c : event_counts)
      if (c < 1) throw ConfigError("bench: event counts must be >= 1");
    if (!(padding_fraction >= 0.0) || padding_fraction >= 1.0)
      throw ConfigError("bench: padding fraction must be in [0, 1)");
    if (repetitions < 1) throw ConfigError("bench: need at least one repetition");
    if (backends.empty()) throw ConfigError("bench: need at least one backend");
    if (width < 2 || height < 2) throw ConfigError("bench: sensor must be at least 2x2");
    if (bins < 1) throw ConfigError("bench: need at least one bin");
    if (!(window_s > 0.0)) throw ConfigError("bench: window must be positive");
    if (n_workers < 0) throw ConfigError("bench: worker count must be >= 0");
  }
};

inline constexpr const char* kBenchPhases[] = {"warp", "splat", "loss", "backward"};

struct BenchRow {
  Backend backend = Backend::naive;
  std::string phase;
  std::size_t n_events = 0;
  double time_us = 0.0;        // median over the timed repetitions
  std::size_t peak_bytes = 0;  // maximum over the timed repetitions
  double loss = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double padding_fraction = 0.0;

  const BenchRow& at(Backend b, const std::string& phase, std::size_t n) const {
    for (const BenchRow& r : rows)
      if (r.backend == b && r.phase == phase && r.n_events == n) return r;
    throw ConfigError("bench report: no row for " + std::string(backend_name(b)) +
                      "/" + phase + "/" + std::to_string(n));
  }

  void validate() const {
    for (const BenchRow& r : rows) {
      if (!(r.time_us > 0.0) || !std::isfinite(r.time_us))
        throw ConfigError("bench report: phase times must be positive");
      if (!std::isfinite(r.loss))
        throw ConfigError("bench report: losses must be finite");
    }
  }

  void write_csv(const std::filesystem::path& path) const {
    validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("bench report: cannot open " + path.string());
    out << "backend,phase,n_events,time_us,peak_bytes,loss\n";
    for (const BenchRow& r : rows)
      out << backend_name(r.backend) << ',' << r.phase << ',' << r.n_events << ','
          << format_number(r.time_us) << ',' << r.peak_bytes << ','
          << format_number(r.loss) << '\n';
    if (!out) throw IoError("bench report: failed writing " + path.string());
  }
};

namespace detail {

// Deterministic synthetic load: uniformly scattered events over the window
// plus a smooth random flow sequence. The same seed and count always produce
// the same window, so every backend sees identical input.
inline EventSlice bench_window(const BenchConfig& cfg, std::size_t n_events,
                               FlowSequence& flows) {
  std::mt19937_64 rng(cfg.seed ^ (0xb5297a4d3f6c2e1bULL + n_events));
  EventSlice slice;
  slice.width = static_cast<std::uint16_t>(cfg.width);
  slice.height = static_cast<std::uint16_t>(cfg.height);
  slice.t_start_us = 0;
  slice.t_end_us = static_cast<std::uint64_t>(std::llround(cfg.window_s * 1e6));

  std::uniform_int_distribution<std::uint64_t> time(0, slice.t_end_us - 1);
  std::uniform_int_distribution<int> px(0, cfg.width - 1), py(0, cfg.height - 1);
  std::vector<std::uint64_t> times(n_events);
  for (auto& t : times) t = time(rng);
  std::sort(times.begin(), times.end());
  slice.events.reserve(n_events);
  for (std::size_t i = 0; i < n_events; ++i)
    slice.events.push_back(Event{times[i], static_cast<std::uint16_t>(px(rng)),
                                 static_cast<std::uint16_t>(py(rng)),
                                 (i & 1) == 0 ? std::int8_t{1} : std::int8_t{-1}});

  flows = FlowSequence::zeros(cfg.width, cfg.height, slice.t_start_us,
                              slice.t_end_us, cfg.bins);
  std::uniform_real_distribution<double> vel(-15.0, 15.0);
  for (FlowField& f : flows.fields) {
    const double u = vel(rng), v = vel(rng);
    f.u.fill(u);
    f.v.fill(v);
  }
  return slice;
}

inline double median_of_times(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  std::nth_element(v.begin(), v.begin() + (mid - 1), v.begin() + mid);
  return 0.5 * (v[mid - 1] + upper);
}

}  // namespace detail

// Runs every configured backend over every event count. Each cell performs
// one untimed warm-up, then `repetitions` timed forward+backward passes;
// per-phase wall time is the median and peak allocation the maximum over the
// timed runs. Backends are cross-checked on the loss of the shared window.
inline BenchReport run_bench(const BenchConfig& cfg = {}) {
  cfg.validate();
  BenchReport report;
  report.padding_fraction = cfg.padding_fraction;

  for (std::size_t n : cfg.event_counts) {
    FlowSequence flows;
    const EventSlice slice = detail::bench_window(cfg, n, flows);

    bool have_ref = false;
    double ref_loss = 0.0;
    Backend ref_backend = Backend::naive;

    for (Backend backend : cfg.backends) {
      EngineOptions opts;
      opts.backend = backend;
      opts.n_workers = cfg.n_workers;
      opts.min_events_per_worker = cfg.min_events_per_worker;
      opts.padding_fraction = backend == Backend::padded ? cfg.padding_fraction : 0.0;
      const Engine engine(opts);

      (void)engine.loss_and_grad(slice, flows);  // warm-up, excluded

      std::vector<double> times[4];
      std::size_t peaks[4] = {0, 0, 0, 0};
      double loss = 0.0;
      for (int rep = 0; rep < cfg.repetitions; ++rep) {
        const auto [fwd, bwd] = engine.loss_and_grad(slice, flows);
        const PhaseStats stats[4] = {fwd.warp_stats, fwd.splat_stats,
                                     fwd.loss_stats, bwd.stats};
        for (int p = 0; p < 4; ++p) {
          times[p].push_back(stats[p].time_us);
          peaks[p] = std::max(peaks[p], stats[p].peak_bytes);
        }
        loss = fwd.loss.value;
      }

      if (!have_ref) {
        have_ref = true;
        ref_loss = loss;
        ref_backend = backend;
      } else {
        const double scale = std::max(1.0, std::abs(ref_loss));
        if (std::abs(loss - ref_loss) > kBackendLossTolerance * scale)
          throw BackendDisagreementError(
              "bench: backend " + std::string(backend_name(backend)) + " loss " +
              format_number(loss) + " disagrees with " + backend_name(ref_backend) +
              " loss " + format_number(ref_loss) + " at " + std::to_string(n) +
              " events");
      }

      for (int p = 0; p < 4; ++p)
        report.rows.push_back(BenchRow{backend, kBenchPhases[p], n,
                                       detail::median_of_times(times[p]), peaks[p],
                                       loss});
    }
  }
  report.validate();
  return report;
}

// Number of adjacent event-count pairs where the parallel-over-naive speedup
// on total window time decreases (a perfectly amortizing pool never slows
// down relative to the per-event baseline as windows grow; timer noise is
// allowed one inversion).
inline int speedup_trend_inversions(const BenchReport& report,
                                    const std::vector<std::size_t>& counts) {
  const auto total = [&](Backend b, std::size_t n) {
    double t = 0.0;
    for (const char* phase : kBenchPhases) t += report.at(b, phase, n).time_us;
    return t;
  };
  int inversions = 0;
  double prev = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double speedup =
        total(Backend::naive, counts[i]) / total(Backend::parallel, counts[i]);
    if (i > 0 && speedup < prev) ++inversions;
    prev = speedup;
  }
  return inversions;
}

}  // namespace evcm
