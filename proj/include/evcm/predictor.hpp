#pragma once
// A direct, optimizable stand-in for a depth + ego-motion network: a
// low-resolution grid of unconstrained depth parameters decoded through
// softplus and bilinear upsampling, plus an independent 6-dof pose parameter
// block per flow bin. Gradients flow back through the same chain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "evcm/geometry.hpp"
#include "evcm/io.hpp"
#include "evcm/types.hpp"
#include "evcm/warp.hpp"

namespace evcm {

// ---- activations ---------------------------------------------------------------

// ln(1 + e^x), evaluated stably on both tails. Always strictly positive.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// d softplus / dx, the logistic sigmoid.
inline double softplus_grad(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- bilinear upsampling --------------------------------------------------------

// Source coordinate an output pixel samples from: output centers map to
// (o + 0.5) / factor - 0.5 on the source grid, clamped to the border.
inline double upsample_src_coord(int out_index, int factor, int src_size) {
  const double s =
      (static_cast<double>(out_index) + 0.5) / static_cast<double>(factor) - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(src_size - 1));
}

inline Image<double> upsample_bilinear(const Image<double>& src, int factor) {
  if (factor < 1) throw ConfigError("upsample: factor must be at least 1");
  if (factor == 1) return src;
  const int sw = src.width(), sh = src.height();
  Image<double> out(sw * factor, sh * factor, 0.0);
  for (int y = 0; y < out.height(); ++y) {
    const double sy = upsample_src_coord(y, factor, sh);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), sh - 1);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = sy - y0;
    for (int x = 0; x < out.width(); ++x) {
      const double sx = upsample_src_coord(x, factor, sw);
      const int x0 = std::min(static_cast<int>(std::floor(sx)), sw - 1);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = sx - x0;
      out.at(x, y) = (1.0 - wx) * (1.0 - wy) * src.at(x0, y0) +
                     wx * (1.0 - wy) * src.at(x1, y0) +
                     (1.0 - wx) * wy * src.at(x0, y1) + wx * wy * src.at(x1, y1);
    }
  }
  return out;
}

// Exact transpose of upsample_bilinear: scatters an output-resolution
// gradient back onto the source grid with the same weights.
inline Image<double> upsample_bilinear_adjoint(const Image<double>& grad, int src_w,
                                               int src_h, int factor) {
  if (factor < 1) throw ConfigError("upsample: factor must be at least 1");
  if (grad.width() != src_w * factor || grad.height() != src_h * factor)
    throw DimensionMismatchError("upsample adjoint: gradient shape mismatch");
  if (factor == 1) return grad;
  Image<double> out(src_w, src_h, 0.0);
  for (int y = 0; y < grad.height(); ++y) {
    const double sy = upsample_src_coord(y, factor, src_h);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), src_h - 1);
    const int y1 = std::min(y0 + 1, src_h - 1);
    const double wy = sy - y0;
    for (int x = 0; x < grad.width(); ++x) {
      const double sx = upsample_src_coord(x, factor, src_w);
      const int x0 = std::min(static_cast<int>(std::floor(sx)), src_w - 1);
      const int x1 = std::min(x0 + 1, src_w - 1);
      const double wx = sx - x0;
      const double g = grad.at(x, y);
      out.at(x0, y0) += (1.0 - wx) * (1.0 - wy) * g;
      out.at(x1, y0) += wx * (1.0 - wy) * g;
      out.at(x0, y1) += (1.0 - wx) * wy * g;
      out.at(x1, y1) += wx * wy * g;
    }
  }
  return out;
}

// ---- the predictor ---------------------------------------------------------------

struct DirectPredictor {
  Image<double> depth_params;  // low resolution, unconstrained reals
  std::vector<PoseStep> poses;
  int upsample = 8;

  int full_width() const { return depth_params.width() * upsample; }
  int full_height() const { return depth_params.height() * upsample; }
  int n_bins() const { return static_cast<int>(poses.size()); }
  std::size_t n_parameters() const { return depth_params.size() + 6 * poses.size(); }

  void validate() const {
    if (depth_params.empty()) throw ConfigError("predictor: empty depth grid");
    if (poses.empty()) throw ConfigError("predictor: need one pose per bin");
    if (upsample < 1) throw ConfigError("predictor: upsample factor must be >= 1");
    for (std::size_t i = 0; i < depth_params.size(); ++i)
      if (!std::isfinite(depth_params[i]))
        throw ConfigError("predictor: non-finite depth parameter");
    for (const PoseStep& p : poses) p.validate();
  }
};

struct DecodedPredictor {
  DepthMap depth;  // softplus(params) upsampled to full resolution; all valid
  std::vector<PoseStep> poses;
};

inline DecodedPredictor decode(const DirectPredictor& pred) {
  pred.validate();
  Image<double> low(pred.depth_params.width(), pred.depth_params.height(), 0.0);
  for (std::size_t i = 0; i < low.size(); ++i) low[i] = softplus(pred.depth_params[i]);
  return {DepthMap(upsample_bilinear(low, pred.upsample)), pred.poses};
}

struct PredictorGrads {
  Image<double> d_depth_params;
  std::vector<PoseGrad> d_poses;
};

// Chains loss gradients back to the parameters: flow-cell gradients pull
// through the depth->flow construction, optional extra full-resolution depth
// and pose gradients (e.g. from the depth-consistency term) add on top, and
// the depth total then passes through the upsampling transpose and the
// softplus derivative.
inline PredictorGrads accumulate_gradients(
    const DirectPredictor& pred, const DepthMap& decoded_depth,
    const CameraIntrinsics& k, const FlowSequence& flows,
    const GradientBuffer& flow_grads, const Image<double>* extra_d_depth = nullptr,
    const std::vector<PoseGrad>* extra_d_poses = nullptr) {
  FlowsBackwardResult fb =
      depth_pose_to_flows_backward(decoded_depth, pred.poses, k, flows, flow_grads);
  if (extra_d_depth) {
    if (!extra_d_depth->same_shape(fb.d_depth))
      throw DimensionMismatchError("gradients: extra depth term shape mismatch");
    for (std::size_t i = 0; i < fb.d_depth.size(); ++i)
      fb.d_depth[i] += (*extra_d_depth)[i];
  }
  const Image<double> low = upsample_bilinear_adjoint(
      fb.d_depth, pred.depth_params.width(), pred.depth_params.height(), pred.upsample);
  PredictorGrads out;
  out.d_depth_params =
      Image<double>(pred.depth_params.width(), pred.depth_params.height(), 0.0);
  for (std::size_t i = 0; i < low.size(); ++i)
    out.d_depth_params[i] = low[i] * softplus_grad(pred.depth_params[i]);
  out.d_poses = std::move(fb.d_poses);
  if (extra_d_poses) {
    if (extra_d_poses->size() != out.d_poses.size())
      throw ConfigError("gradients: extra pose term count mismatch");
    for (std::size_t i = 0; i < out.d_poses.size(); ++i) {
      out.d_poses[i].omega = out.d_poses[i].omega + (*extra_d_poses)[i].omega;
      out.d_poses[i].trans = out.d_poses[i].trans + (*extra_d_poses)[i].trans;
    }
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------------

// Depth parameters as PFM (float32) plus poses and the upsample factor as CSV.
inline void save_predictor(const DirectPredictor& pred,
                           const std::filesystem::path& params_pfm,
                           const std::filesystem::path& poses_csv) {
  pred.validate();
  write_pfm(to_float_image(pred.depth_params), params_pfm);
  CsvWriter csv(poses_csv,
                {"bin", "upsample", "wx", "wy", "wz", "tx", "ty", "tz"});
  for (std::size_t i = 0; i < pred.poses.size(); ++i) {
    const PoseStep& p = pred.poses[i];
    csv.write_row({std::to_string(i), std::to_string(pred.upsample),
                   format_number(p.omega.x), format_number(p.omega.y),
                   format_number(p.omega.z), format_number(p.trans.x),
                   format_number(p.trans.y), format_number(p.trans.z)});
  }
  csv.flush();
}

inline DirectPredictor load_predictor(const std::filesystem::path& params_pfm,
                                      const std::filesystem::path& poses_csv) {
  DirectPredictor pred;
  pred.depth_params = to_double_image(read_pfm(params_pfm));
  const auto rows = read_csv(poses_csv);
  if (rows.size() < 2 || rows[0].size() != 8)
    throw ConfigError("predictor checkpoint: malformed pose table");
  pred.upsample = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 8)
      throw ConfigError("predictor checkpoint: malformed pose row");
    const int factor = std::stoi(rows[r][1]);
    if (pred.upsample == 0)
      pred.upsample = factor;
    else if (factor != pred.upsample)
      throw ConfigError("predictor checkpoint: inconsistent upsample factor");
    PoseStep p;
    p.omega = {std::stod(rows[r][2]), std::stod(rows[r][3]), std::stod(rows[r][4])};
    p.trans = {std::stod(rows[r][5]), std::stod(rows[r][6]), std::stod(rows[r][7])};
    pred.poses.push_back(p);
  }
  pred.validate();
  return pred;
}

}  // namespace evcm
