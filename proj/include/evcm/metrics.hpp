#pragma once

// Depth and disparity evaluation utilities: cutoff-limited mean absolute
// error, median- and grid-search scale alignment for up-to-scale predictions,
// disparity outlier/error rates, event-coverage masks, and a flat report
// container that serializes deterministically to CSV and JSON.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "evcm/io.hpp"
#include "evcm/types.hpp"

namespace evcm {

// Raised when a metric's pixel selection (validity, cutoff, mask, overlap)
// comes out empty: an average over nothing is a bug at the call site, not 0.
class EmptySelectionError : public Error {
 public:
  using Error::Error;
};

// True (1) at pixels that received at least one event in the slice.
inline Image<std::uint8_t> event_mask(const EventSlice& slice) {
  if (slice.width <= 0 || slice.height <= 0)
    throw DimensionMismatchError("event mask: slice must have a positive resolution");
  if (!slice.events.empty()) slice.validate();
  Image<std::uint8_t> mask(slice.width, slice.height, 0);
  for (const Event& e : slice.events) mask.at(e.x, e.y) = 1;
  return mask;
}

// Mean |pred - gt| over pixels where gt is valid, gt <= cutoff, and (when a
// mask is supplied) the mask is nonzero. The prediction is used as-is.
inline double mae_depth(const DepthMap& pred, const DepthMap& gt, double cutoff,
                        const Image<std::uint8_t>& mask = {}) {
  if (!pred.d.same_shape(gt.d))
    throw DimensionMismatchError("depth MAE: prediction and reference shapes differ");
  if (!mask.empty() && !mask.same_shape(gt.d))
    throw DimensionMismatchError("depth MAE: mask shape must match the depth maps");
  if (!(cutoff > 0.0) || !std::isfinite(cutoff))
    throw ConfigError("depth MAE: cutoff must be positive and finite");

  double acc = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!gt.is_valid(x, y) || gt.d.at(x, y) > cutoff) continue;
      if (!mask.empty() && mask.at(x, y) == 0) continue;
      acc += std::abs(pred.d.at(x, y) - gt.d.at(x, y));
      ++n;
    }
  if (n == 0)
    throw EmptySelectionError("depth MAE: no valid pixels under cutoff " +
                              format_number(cutoff));
  return acc / static_cast<double>(n);
}

enum class ScaleMode { approx, best };

namespace detail {

inline double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (n % 2 == 1) return upper;
  std::nth_element(v.begin(), v.begin() + (mid - 1), v.begin() + mid);
  return 0.5 * (v[mid - 1] + upper);
}

}  // namespace detail

// Scale factor s such that s * pred best matches ref over their common valid
// pixels. approx: ratio of medians. best: lowest MAE on a logarithmic grid of
// 64 points per decade spanning 3 decades centered at the approx value (the
// center point is on the grid, so best can never score worse than approx).
inline double scale_align(const DepthMap& pred, const DepthMap& ref,
                          ScaleMode mode = ScaleMode::approx) {
  if (!pred.d.same_shape(ref.d))
    throw DimensionMismatchError("scale alignment: prediction and reference shapes differ");

  std::vector<double> p, r;
  for (int y = 0; y < ref.height(); ++y)
    for (int x = 0; x < ref.width(); ++x) {
      if (!pred.is_valid(x, y) || !ref.is_valid(x, y)) continue;
      p.push_back(pred.d.at(x, y));
      r.push_back(ref.d.at(x, y));
    }
  if (p.empty())
    throw EmptySelectionError("scale alignment: no overlapping valid pixels");

  const double mp = detail::median_of(p);
  const double mr = detail::median_of(r);
  if (!(mp > 0.0) || !std::isfinite(mp) || !(mr > 0.0) || !std::isfinite(mr))
    throw ConfigError("scale alignment: medians must be positive and finite");
  const double approx = mr / mp;
  if (mode == ScaleMode::approx) return approx;

  const auto mae_at = [&](double s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(s * p[i] - r[i]);
    return acc / static_cast<double>(p.size());
  };
  constexpr int kPointsPerDecade = 64;
  constexpr int kDecades = 3;
  constexpr int kSteps = kPointsPerDecade * kDecades;  // inclusive: kSteps + 1 points
  double best_s = approx;
  double best_mae = mae_at(approx);
  for (int i = 0; i <= kSteps; ++i) {
    const double exponent = -0.5 * kDecades + static_cast<double>(i) / kPointsPerDecade;
    const double s = approx * std::pow(10.0, exponent);
    const double m = mae_at(s);
    if (m < best_mae) {
      best_mae = m;
      best_s = s;
    }
  }
  return best_s;
}

struct DisparityMetrics {
  double p1;    // percent of valid pixels with |error| > 1 px
  double p2;    // percent of valid pixels with |error| > 2 px
  double mae;   // px
  double rmse;  // px
};

// Error rates between two disparity images. Without an explicit validity
// mask, pixels with finite positive reference disparity count.
inline DisparityMetrics disparity_metrics(const Image<double>& pred,
                                          const Image<double>& gt,
                                          const Image<std::uint8_t>& valid = {}) {
  if (!pred.same_shape(gt))
    throw DimensionMismatchError("disparity metrics: prediction and reference shapes differ");
  if (!valid.empty() && !valid.same_shape(gt))
    throw DimensionMismatchError("disparity metrics: mask shape must match the images");

  std::size_t n = 0, over1 = 0, over2 = 0;
  double acc = 0.0, acc2 = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool ok = valid.empty() ? std::isfinite(gt[i]) && gt[i] > 0.0 : valid[i] != 0;
    if (!ok) continue;
    const double e = std::abs(pred[i] - gt[i]);
    if (e > 1.0) ++over1;
    if (e > 2.0) ++over2;
    acc += e;
    acc2 += e * e;
    ++n;
  }
  if (n == 0)
    throw EmptySelectionError("disparity metrics: no valid pixels selected");
  const double dn = static_cast<double>(n);
  return DisparityMetrics{100.0 * static_cast<double>(over1) / dn,
                          100.0 * static_cast<double>(over2) / dn, acc / dn,
                          std::sqrt(acc2 / dn)};
}

// Disparity image for a synthetic stereo rig: fx * baseline / depth at valid
// pixels, 0 elsewhere.
inline Image<double> disparity_from_depth(const DepthMap& depth, double fx,
                                          double baseline) {
  if (!(fx > 0.0) || !std::isfinite(fx) || !(baseline > 0.0) || !std::isfinite(baseline))
    throw ConfigError("disparity: focal length and baseline must be positive");
  Image<double> out(depth.width(), depth.height(), 0.0);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x)
      if (depth.is_valid(x, y)) out.at(x, y) = fx * baseline / depth.d.at(x, y);
  return out;
}

// One evaluation condition: a depth cutoff crossed with dense or event-masked
// pixel selection. The scale factor has already been applied to the
// prediction for every metric in the row.
struct EvalRow {
  double cutoff = 0.0;
  bool event_masked = false;
  std::size_t n_pixels = 0;
  double scale = 1.0;
  double mae = 0.0;
  DisparityMetrics disparity{0.0, 0.0, 0.0, 0.0};
};

struct EvalReport {
  std::vector<EvalRow> rows;

  void validate() const {
    for (const EvalRow& r : rows) {
      if (r.n_pixels == 0)
        throw EmptySelectionError("evaluation report: row with an empty selection");
      const double values[] = {r.cutoff,        r.scale,        r.mae,
                               r.disparity.p1,  r.disparity.p2, r.disparity.mae,
                               r.disparity.rmse};
      for (double v : values)
        if (!std::isfinite(v))
          throw ConfigError("evaluation report: metrics must be finite");
    }
  }

  void write_csv(const std::filesystem::path& path) const {
    validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("evaluation report: cannot open " + path.string());
    out << "cutoff,mode,n_pixels,scale,mae,disp_1pe,disp_2pe,disp_mae,disp_rmse\n";
    for (const EvalRow& r : rows) {
      out << format_number(r.cutoff) << ',' << (r.event_masked ? "masked" : "dense")
          << ',' << r.n_pixels << ',' << format_number(r.scale) << ','
          << format_number(r.mae) << ',' << format_number(r.disparity.p1) << ','
          << format_number(r.disparity.p2) << ',' << format_number(r.disparity.mae)
          << ',' << format_number(r.disparity.rmse) << '\n';
    }
    if (!out) throw IoError("evaluation report: failed writing " + path.string());
  }

  void write_json(const std::filesystem::path& path) const {
    validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("evaluation report: cannot open " + path.string());
    out << "[\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const EvalRow& r = rows[i];
      out << "  {\"cutoff\": " << format_number(r.cutoff) << ", \"mode\": \""
          << (r.event_masked ? "masked" : "dense")
          << "\", \"n_pixels\": " << r.n_pixels
          << ", \"scale\": " << format_number(r.scale)
          << ", \"mae\": " << format_number(r.mae)
          << ", \"disp_1pe\": " << format_number(r.disparity.p1)
          << ", \"disp_2pe\": " << format_number(r.disparity.p2)
          << ", \"disp_mae\": " << format_number(r.disparity.mae)
          << ", \"disp_rmse\": " << format_number(r.disparity.rmse) << "}"
          << (i + 1 < rows.size() ? "," : "") << '\n';
    }
    out << "]\n";
    if (!out) throw IoError("evaluation report: failed writing " + path.string());
  }
};

struct EvalConfig {
  std::vector<double> cutoffs = {10.0, 20.0, 30.0};  // meters
  ScaleMode scale_mode = ScaleMode::approx;
  double fx = 100.0;        // synthetic stereo geometry for disparity metrics
  double baseline = 0.1;
};

// Full evaluation sweep: dense rows for every cutoff, then event-masked rows
// when a slice is supplied. The prediction is scale-aligned once per mode
// over that mode's whole valid selection, and disparity metrics are computed
// from the scaled prediction on each row's exact pixel selection.
inline EvalReport evaluate_depth(const DepthMap& pred, const DepthMap& gt,
                                 const EventSlice* events = nullptr,
                                 const EvalConfig& cfg = {}) {
  if (!pred.d.same_shape(gt.d))
    throw DimensionMismatchError("evaluation: prediction and reference shapes differ");
  if (cfg.cutoffs.empty()) throw ConfigError("evaluation: need at least one cutoff");

  EvalReport report;
  const int n_modes = events == nullptr ? 1 : 2;
  for (int mode = 0; mode < n_modes; ++mode) {
    const bool masked = mode == 1;
    Image<std::uint8_t> selection;  // empty = no extra restriction
    if (masked) {
      selection = event_mask(*events);
      if (!selection.same_shape(gt.d))
        throw DimensionMismatchError("evaluation: event slice resolution must match depth");
    }

    // Align scale on this mode's full selection, independent of cutoffs.
    DepthMap pred_mode = pred;
    if (masked) {
      Image<std::uint8_t> overlap(selection.width(), selection.height(), 0);
      for (std::size_t i = 0; i < selection.size(); ++i)
        if (selection[i] != 0 && (!pred.has_mask() || pred.valid[i] != 0))
          overlap[i] = 1;
      pred_mode.valid = std::move(overlap);
    }
    const double scale = scale_align(pred_mode, gt, cfg.scale_mode);

    DepthMap scaled = pred;
    for (std::size_t i = 0; i < scaled.d.size(); ++i) scaled.d[i] *= scale;
    const Image<double> pred_disp = disparity_from_depth(scaled, cfg.fx, cfg.baseline);
    const Image<double> gt_disp = disparity_from_depth(gt, cfg.fx, cfg.baseline);

    for (double cutoff : cfg.cutoffs) {
      EvalRow row;
      row.cutoff = cutoff;
      row.event_masked = masked;
      row.scale = scale;
      row.mae = mae_depth(scaled, gt, cutoff, selection);

      Image<std::uint8_t> valid(gt.width(), gt.height(), 0);
      std::size_t n = 0;
      for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
          if (!gt.is_valid(x, y) || gt.d.at(x, y) > cutoff) continue;
          if (masked && selection.at(x, y) == 0) continue;
          valid.at(x, y) = 1;
          ++n;
        }
      row.n_pixels = n;
      row.disparity = disparity_metrics(pred_disp, gt_disp, valid);
      report.rows.push_back(row);
    }
  }
  report.validate();
  return report;
}

}  // namespace evcm
