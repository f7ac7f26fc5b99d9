// Depth/disparity evaluation: event masks, cutoff-limited MAE, scale
// alignment, disparity error rates, and report serialization.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "evcm/metrics.hpp"
#include "test_support.hpp"

namespace {

using evcm::DepthMap;
using evcm::DisparityMetrics;
using evcm::EmptySelectionError;
using evcm::Event;
using evcm::EventSlice;
using evcm::Image;
using evcm::ScaleMode;
using evcm_test::TempDir;

EventSlice tiny_slice(int w, int h) {
  EventSlice s;
  s.width = static_cast<std::uint16_t>(w);
  s.height = static_cast<std::uint16_t>(h);
  s.t_start_us = 0;
  s.t_end_us = 1000;
  return s;
}

// An 8x6 two-plane reference: near plane (depth 2) on the left half, far
// plane (depth 8) on the right, top row invalid.
DepthMap two_plane_gt() {
  Image<double> d(8, 6, 0.0);
  Image<std::uint8_t> valid(8, 6, 0);
  for (int y = 1; y < 6; ++y)
    for (int x = 0; x < 8; ++x) {
      d.at(x, y) = x < 4 ? 2.0 : 8.0;
      valid.at(x, y) = 1;
    }
  return DepthMap(std::move(d), std::move(valid));
}

TEST(EventMask, EmptySliceIsAllFalse) {
  const Image<std::uint8_t> mask = evcm::event_mask(tiny_slice(5, 4));
  ASSERT_EQ(mask.width(), 5);
  ASSERT_EQ(mask.height(), 4);
  for (std::size_t i = 0; i < mask.size(); ++i) EXPECT_EQ(mask[i], 0);
}

TEST(EventMask, SingleEventMarksSinglePixel) {
  EventSlice s = tiny_slice(8, 8);
  s.events.push_back(Event{10, 3, 4, 1});
  const Image<std::uint8_t> mask = evcm::event_mask(s);
  int count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) count += mask[i] != 0;
  EXPECT_EQ(count, 1);
  EXPECT_EQ(mask.at(3, 4), 1);
}

TEST(EventMask, CardinalityEqualsDistinctPixelCount) {
  EventSlice s = tiny_slice(16, 12);
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> px(0, 15), py(0, 11), pt(0, 999);
  std::vector<std::uint32_t> times;
  for (int i = 0; i < 200; ++i) times.push_back(static_cast<std::uint32_t>(pt(rng)));
  std::sort(times.begin(), times.end());
  std::set<std::pair<int, int>> distinct;
  for (int i = 0; i < 200; ++i) {
    const int x = px(rng), y = py(rng);
    distinct.insert({x, y});
    s.events.push_back(Event{times[static_cast<std::size_t>(i)],
                             static_cast<std::uint16_t>(x),
                             static_cast<std::uint16_t>(y),
                             i % 2 == 0 ? std::int8_t{1} : std::int8_t{-1}});
  }
  const Image<std::uint8_t> mask = evcm::event_mask(s);
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) count += mask[i] != 0;
  EXPECT_EQ(count, distinct.size());
}

TEST(MaeDepth, PerfectPredictionScoresZero) {
  const DepthMap gt = two_plane_gt();
  EXPECT_DOUBLE_EQ(evcm::mae_depth(gt, gt, 100.0), 0.0);
}

TEST(MaeDepth, UniformOffsetScoresOne) {
  const DepthMap gt = two_plane_gt();
  DepthMap pred = gt;
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] += 1.0;
  EXPECT_DOUBLE_EQ(evcm::mae_depth(pred, gt, 100.0), 1.0);
}

TEST(MaeDepth, CutoffRestrictsToNearPlane) {
  const DepthMap gt = two_plane_gt();
  DepthMap pred = gt;
  // Perturb four near-plane pixels; a cutoff of 4 m selects exactly the near
  // plane (20 valid pixels), so the hand-enumerated mean is (.1+.3+.5+.7)/20.
  pred.d.at(0, 1) += 0.1;
  pred.d.at(1, 2) += 0.3;
  pred.d.at(2, 3) -= 0.5;
  pred.d.at(3, 4) += 0.7;
  pred.d.at(6, 2) += 100.0;  // far plane: must not affect the cutoff-4 result
  double expected = 0.0;
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x)
      if (gt.is_valid(x, y) && gt.d.at(x, y) <= 4.0)
        expected += std::abs(pred.d.at(x, y) - gt.d.at(x, y));
  expected /= 20.0;
  EXPECT_DOUBLE_EQ(evcm::mae_depth(pred, gt, 4.0), expected);
  EXPECT_DOUBLE_EQ(expected, (0.1 + 0.3 + 0.5 + 0.7) / 20.0);
  EXPECT_GT(evcm::mae_depth(pred, gt, 100.0), 1.0);  // far outlier now counts
}

TEST(MaeDepth, EventMaskRestrictsSelection) {
  const DepthMap gt = two_plane_gt();
  DepthMap pred = gt;
  pred.d.at(1, 1) += 0.5;
  pred.d.at(5, 5) += 2.0;
  EventSlice s = tiny_slice(8, 6);
  s.events.push_back(Event{10, 1, 1, 1});
  s.events.push_back(Event{20, 5, 5, -1});
  const Image<std::uint8_t> mask = evcm::event_mask(s);
  EXPECT_DOUBLE_EQ(evcm::mae_depth(pred, gt, 100.0, mask), (0.5 + 2.0) / 2.0);
  EXPECT_DOUBLE_EQ(evcm::mae_depth(pred, gt, 4.0, mask), 0.5);
}

TEST(MaeDepth, RejectsDegenerateInputs) {
  const DepthMap gt = two_plane_gt();
  EXPECT_THROW(evcm::mae_depth(gt, gt, 1.0), EmptySelectionError);  // below all
  EXPECT_THROW(evcm::mae_depth(gt, gt, 0.0), evcm::ConfigError);
  EXPECT_THROW(evcm::mae_depth(gt, gt, -3.0), evcm::ConfigError);
  const DepthMap small(Image<double>(4, 4, 1.0));
  EXPECT_THROW(evcm::mae_depth(small, gt, 10.0), evcm::DimensionMismatchError);
  Image<std::uint8_t> wrong_mask(3, 3, 1);
  EXPECT_THROW(evcm::mae_depth(gt, gt, 10.0, wrong_mask),
               evcm::DimensionMismatchError);
}

TEST(ScaleAlign, MedianRatioRecoversUniformScale) {
  const DepthMap ref = two_plane_gt();
  DepthMap pred = ref;
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] *= 2.0;
  const double s = evcm::scale_align(pred, ref, ScaleMode::approx);
  EXPECT_DOUBLE_EQ(s, 0.5);
  DepthMap scaled = pred;
  for (std::size_t i = 0; i < scaled.d.size(); ++i) scaled.d[i] *= s;
  EXPECT_DOUBLE_EQ(evcm::mae_depth(scaled, ref, 100.0), 0.0);
}

TEST(ScaleAlign, ApproxCompensatesPredictionRescaling) {
  const DepthMap ref = two_plane_gt();
  DepthMap pred = ref;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> jitter(0.8, 1.25);
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] *= jitter(rng);
  const double s = evcm::scale_align(pred, ref, ScaleMode::approx);
  DepthMap rescaled = pred;
  const double c = 3.7;
  for (std::size_t i = 0; i < rescaled.d.size(); ++i) rescaled.d[i] *= c;
  const double s2 = evcm::scale_align(rescaled, ref, ScaleMode::approx);
  EXPECT_NEAR(s2 * c, s, 1e-12 * std::abs(s));
}

TEST(ScaleAlign, BestModeNeverScoresWorseThanApprox) {
  const DepthMap ref = two_plane_gt();
  DepthMap pred = ref;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> jitter(0.6, 2.0);
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] *= jitter(rng);

  const double sa = evcm::scale_align(pred, ref, ScaleMode::approx);
  const double sb = evcm::scale_align(pred, ref, ScaleMode::best);
  const auto mae_at = [&](double s) {
    DepthMap scaled = pred;
    for (std::size_t i = 0; i < scaled.d.size(); ++i) scaled.d[i] *= s;
    return evcm::mae_depth(scaled, ref, 1e9);
  };
  EXPECT_LE(mae_at(sb), mae_at(sa) * (1.0 + 1e-12));
}

TEST(ScaleAlign, BestModeMatchesDenseScan) {
  const DepthMap ref = two_plane_gt();
  DepthMap pred = ref;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> jitter(0.5, 1.8);
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] *= jitter(rng);

  const double approx = evcm::scale_align(pred, ref, ScaleMode::approx);
  const double best = evcm::scale_align(pred, ref, ScaleMode::best);

  // Brute-force oracle: a 16x finer logarithmic scan over the same span. The
  // objective is convex in the scale, so the coarse argmin must sit within
  // one coarse grid step of the fine one.
  const auto mae_at = [&](double s) {
    DepthMap scaled = pred;
    for (std::size_t i = 0; i < scaled.d.size(); ++i) scaled.d[i] *= s;
    return evcm::mae_depth(scaled, ref, 1e9);
  };
  double fine_best = approx, fine_mae = mae_at(approx);
  for (int i = 0; i <= 3 * 1024; ++i) {
    const double s = approx * std::pow(10.0, -1.5 + static_cast<double>(i) / 1024.0);
    const double m = mae_at(s);
    if (m < fine_mae) {
      fine_mae = m;
      fine_best = s;
    }
  }
  EXPECT_LE(std::abs(std::log10(best) - std::log10(fine_best)),
            1.0 / 64 + 1.0 / 1024 + 1e-12);
}

TEST(ScaleAlign, EmptyOverlapThrows) {
  Image<double> d(4, 4, 1.0);
  Image<std::uint8_t> left(4, 4, 0), right(4, 4, 0);
  for (int y = 0; y < 4; ++y) {
    left.at(0, y) = 1;
    right.at(3, y) = 1;
  }
  const DepthMap a(d, left), b(d, right);
  EXPECT_THROW(evcm::scale_align(a, b, ScaleMode::approx), EmptySelectionError);
}

TEST(Disparity, PerfectPredictionScoresZero) {
  Image<double> disp(6, 4, 3.0);
  const DisparityMetrics m = evcm::disparity_metrics(disp, disp);
  EXPECT_DOUBLE_EQ(m.p1, 0.0);
  EXPECT_DOUBLE_EQ(m.p2, 0.0);
  EXPECT_DOUBLE_EQ(m.mae, 0.0);
  EXPECT_DOUBLE_EQ(m.rmse, 0.0);
}

TEST(Disparity, UniformOnePointFiveError) {
  Image<double> gt(6, 4, 3.0), pred(6, 4, 4.5);
  const DisparityMetrics m = evcm::disparity_metrics(pred, gt);
  EXPECT_DOUBLE_EQ(m.p1, 100.0);
  EXPECT_DOUBLE_EQ(m.p2, 0.0);
  EXPECT_DOUBLE_EQ(m.mae, 1.5);
  EXPECT_DOUBLE_EQ(m.rmse, 1.5);
}

TEST(Disparity, ThreePixelOracle) {
  Image<double> gt(3, 1, 10.0), pred(3, 1, 10.0);
  pred.at(0, 0) += 0.5;
  pred.at(1, 0) -= 1.5;
  pred.at(2, 0) += 3.0;
  const DisparityMetrics m = evcm::disparity_metrics(pred, gt);
  EXPECT_NEAR(m.p1, 200.0 / 3.0, 1e-9);
  EXPECT_NEAR(m.p2, 100.0 / 3.0, 1e-9);
  EXPECT_NEAR(m.mae, 5.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.rmse, 1.9578900207451218, 1e-12);
  EXPECT_DOUBLE_EQ(m.rmse, std::sqrt((0.25 + 2.25 + 9.0) / 3.0));
}

TEST(Disparity, RmseDominatesMaeAndIgnoresPixelOrder) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> val(1.0, 50.0);
  Image<double> gt(10, 8, 0.0), pred(10, 8, 0.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = val(rng);
    pred[i] = val(rng);
  }
  const DisparityMetrics m = evcm::disparity_metrics(pred, gt);
  EXPECT_GE(m.rmse, m.mae);

  std::vector<std::size_t> perm(gt.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Image<double> gt2 = gt, pred2 = pred;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    gt2[i] = gt[perm[i]];
    pred2[i] = pred[perm[i]];
  }
  const DisparityMetrics p = evcm::disparity_metrics(pred2, gt2);
  EXPECT_DOUBLE_EQ(p.p1, m.p1);
  EXPECT_DOUBLE_EQ(p.p2, m.p2);
  EXPECT_DOUBLE_EQ(p.mae, m.mae);
  EXPECT_DOUBLE_EQ(p.rmse, m.rmse);
}

TEST(Disparity, EmptySelectionThrows) {
  Image<double> zeros(4, 4, 0.0);
  EXPECT_THROW(evcm::disparity_metrics(zeros, zeros), EmptySelectionError);
  Image<double> other(3, 3, 1.0);
  EXPECT_THROW(evcm::disparity_metrics(other, zeros), evcm::DimensionMismatchError);
}

TEST(Disparity, FromDepthSpansInverseRange) {
  Image<double> d(3, 1, 1.0);
  d.at(1, 0) = 10.0;
  d.at(2, 0) = 50.0;
  Image<std::uint8_t> valid(3, 1, 1);
  valid.at(1, 0) = 0;
  const Image<double> disp =
      evcm::disparity_from_depth(DepthMap(d, valid), 50.0, 1.0);
  EXPECT_DOUBLE_EQ(disp.at(0, 0), 50.0);
  EXPECT_DOUBLE_EQ(disp.at(1, 0), 0.0);  // invalid pixel stays empty
  EXPECT_DOUBLE_EQ(disp.at(2, 0), 1.0);
  EXPECT_THROW(evcm::disparity_from_depth(DepthMap(d), 0.0, 1.0), evcm::ConfigError);
}

TEST(EvaluateDepth, TwoModeReportRoundTrips) {
  const DepthMap gt = two_plane_gt();
  DepthMap pred = gt;
  for (std::size_t i = 0; i < pred.d.size(); ++i) pred.d[i] *= 2.0;

  EventSlice s = tiny_slice(8, 6);
  s.events.push_back(Event{10, 1, 1, 1});
  s.events.push_back(Event{20, 2, 3, -1});

  evcm::EvalConfig cfg;
  cfg.cutoffs = {4.0, 10.0};
  const evcm::EvalReport report = evcm::evaluate_depth(pred, gt, &s, cfg);
  ASSERT_EQ(report.rows.size(), 4u);

  // Dense rows first, then masked rows, cutoffs in the given order.
  EXPECT_FALSE(report.rows[0].event_masked);
  EXPECT_FALSE(report.rows[1].event_masked);
  EXPECT_TRUE(report.rows[2].event_masked);
  EXPECT_TRUE(report.rows[3].event_masked);
  EXPECT_DOUBLE_EQ(report.rows[0].cutoff, 4.0);
  EXPECT_DOUBLE_EQ(report.rows[1].cutoff, 10.0);
  EXPECT_EQ(report.rows[0].n_pixels, 20u);  // near plane
  EXPECT_EQ(report.rows[1].n_pixels, 40u);  // both planes
  EXPECT_EQ(report.rows[2].n_pixels, 2u);   // event pixels, near plane
  EXPECT_EQ(report.rows[3].n_pixels, 2u);

  for (const evcm::EvalRow& r : report.rows) {
    EXPECT_DOUBLE_EQ(r.scale, 0.5);  // alignment undoes the factor exactly
    EXPECT_DOUBLE_EQ(r.mae, 0.0);
    EXPECT_DOUBLE_EQ(r.disparity.mae, 0.0);
    EXPECT_DOUBLE_EQ(r.disparity.rmse, 0.0);
  }

  TempDir dir;
  const auto csv_path = dir.file("report.csv");
  const auto json_path = dir.file("report.json");
  report.write_csv(csv_path);
  report.write_json(json_path);

  const auto csv = evcm::read_csv(csv_path);
  ASSERT_EQ(csv.size(), 5u);  // header + 4 rows
  ASSERT_EQ(csv[0].size(), 9u);
  EXPECT_EQ(csv[0][0], "cutoff");
  EXPECT_EQ(csv[1][1], "dense");
  EXPECT_EQ(csv[3][1], "masked");

  const std::vector<unsigned char> raw = evcm::detail::read_file_bytes(json_path);
  const std::string json(raw.begin(), raw.end());
  EXPECT_NE(json.find("\"mode\": \"masked\""), std::string::npos);
  EXPECT_NE(json.find("\"scale\": 0.5"), std::string::npos);
  EXPECT_EQ(json.front(), '[');
}

TEST(EvaluateDepth, RejectsBadConfigurations) {
  const DepthMap gt = two_plane_gt();
  evcm::EvalConfig no_cutoffs;
  no_cutoffs.cutoffs.clear();
  EXPECT_THROW(evcm::evaluate_depth(gt, gt, nullptr, no_cutoffs), evcm::ConfigError);

  EventSlice wrong = tiny_slice(4, 4);
  wrong.events.push_back(Event{10, 1, 1, 1});
  EXPECT_THROW(evcm::evaluate_depth(gt, gt, &wrong, {}),
               evcm::DimensionMismatchError);
}

}  // namespace
