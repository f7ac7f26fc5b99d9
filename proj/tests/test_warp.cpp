// Warping, splatting, the contrast loss, its analytic backward pass, and
// backend agreement.

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "evcm/engine.hpp"
#include "evcm/types.hpp"
#include "evcm/warp.hpp"
#include "fd_support.hpp"
#include "test_support.hpp"

using namespace evcm;
using evcm_test::FdInstance;
using evcm_test::FdInstanceParams;

namespace {

FlowSequence constant_flow(int w, int h, std::uint64_t t0, std::uint64_t t1, int bins,
                           const std::vector<Vec2>& per_bin) {
  FlowSequence seq = FlowSequence::zeros(w, h, t0, t1, bins);
  for (int b = 0; b < bins; ++b) {
    seq.fields[static_cast<std::size_t>(b)].u.fill(per_bin[static_cast<std::size_t>(b)].x);
    seq.fields[static_cast<std::size_t>(b)].v.fill(per_bin[static_cast<std::size_t>(b)].y);
  }
  return seq;
}

}  // namespace

TEST(WarpEvent, ConstantFlowClosedForm) {
  const FlowSequence flows = constant_flow(16, 16, 0, 10'000, 1, {{100.0, 0.0}});
  const Vec2 fwd = warp_event({2.0, 2.0}, 0.005, 0.010, flows);
  EXPECT_NEAR(fwd.x, 2.5, 1e-12);
  EXPECT_NEAR(fwd.y, 2.0, 1e-12);
  const Vec2 bwd = warp_event({2.0, 2.0}, 0.005, 0.0, flows);
  EXPECT_NEAR(bwd.x, 1.5, 1e-12);
  EXPECT_NEAR(bwd.y, 2.0, 1e-12);
  EXPECT_EQ(warp_event({2.0, 2.0}, 0.005, 0.005, flows), (Vec2{2.0, 2.0}));
}

TEST(WarpEvent, TwoBinComposition) {
  const FlowSequence flows =
      constant_flow(16, 16, 0, 20'000, 2, {{100.0, 0.0}, {0.0, 100.0}});
  const Vec2 p = warp_event({2.0, 3.0}, 0.0, 0.020, flows);
  EXPECT_NEAR(p.x, 3.0, 1e-12);
  EXPECT_NEAR(p.y, 4.0, 1e-12);
  // And back again: retraces through both bins.
  const Vec2 back = warp_event(p, 0.020, 0.0, flows);
  EXPECT_NEAR(back.x, 2.0, 1e-12);
  EXPECT_NEAR(back.y, 3.0, 1e-12);
}

TEST(SplatBilinear, WorkedExamples) {
  Image<double> cnt(8, 8, 0.0), val(8, 8, 0.0);
  splat_bilinear({2.5, 3.0}, 1.0, 0.0, cnt, val);
  EXPECT_DOUBLE_EQ(cnt.at(2, 3), 0.5);
  EXPECT_DOUBLE_EQ(cnt.at(3, 3), 0.5);
  cnt.fill(0.0);
  splat_bilinear({2.0, 3.0}, 1.0, 0.0, cnt, val);
  EXPECT_DOUBLE_EQ(cnt.at(2, 3), 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < cnt.size(); ++i) total += cnt[i];
  EXPECT_DOUBLE_EQ(total, 1.0);
  cnt.fill(0.0);
  val.fill(0.0);
  splat_bilinear({2.25, 3.75}, 1.0, 2.0, cnt, val);
  EXPECT_DOUBLE_EQ(cnt.at(2, 3), 0.1875);
  EXPECT_DOUBLE_EQ(cnt.at(3, 3), 0.0625);
  EXPECT_DOUBLE_EQ(cnt.at(2, 4), 0.5625);
  EXPECT_DOUBLE_EQ(cnt.at(3, 4), 0.1875);
  EXPECT_DOUBLE_EQ(val.at(2, 4), 2.0 * 0.5625);
}

TEST(IweStack, EmptySliceGivesZeroStackAndWarningLoss) {
  EventSlice s;
  s.width = 8;
  s.height = 8;
  s.t_start_us = 0;
  s.t_end_us = 1000;
  const FlowSequence flows = FlowSequence::zeros(8, 8, 0, 1000, 2);
  const ForwardResult fwd = build_iwe_stack(s, flows);
  EXPECT_TRUE(fwd.loss.no_survivors);
  EXPECT_EQ(fwd.loss.value, 0.0);
  for (int r = 0; r < fwd.stack.n_refs; ++r) {
    EXPECT_EQ(fwd.stack.n_active[static_cast<std::size_t>(r)], 0);
    for (int c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < fwd.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].size(); ++i)
        EXPECT_EQ(fwd.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)][i], 0.0);
  }
}

TEST(IweStack, SingleMidWindowEventUnderZeroFlow) {
  EventSlice s;
  s.width = 8;
  s.height = 8;
  s.t_start_us = 0;
  s.t_end_us = 1'000'000;
  s.events = {{500'000, 3, 4, 1}};
  const FlowSequence flows = FlowSequence::zeros(8, 8, 0, 1'000'000, 1);
  const ForwardResult fwd = build_iwe_stack(s, flows);
  ASSERT_FALSE(fwd.loss.no_survivors);
  for (int r = 0; r < 2; ++r) {
    EXPECT_DOUBLE_EQ(fwd.stack.count[static_cast<std::size_t>(r)][0].at(3, 4), 1.0);
    EXPECT_NEAR(fwd.stack.tsum[static_cast<std::size_t>(r)][0].at(3, 4), 0.5, 1e-12);
    EXPECT_EQ(fwd.stack.n_active[static_cast<std::size_t>(r)], 1);
  }
  // Hand evaluation: A = 0.5 at one active pixel per reference.
  EXPECT_NEAR(fwd.loss.value, 0.25, 1e-6);
}

TEST(IweStack, EventExitingAtLastReferenceIsExcludedEverywhere) {
  EventSlice s;
  s.width = 8;
  s.height = 8;
  s.t_start_us = 0;
  s.t_end_us = 1'000'000;
  s.events = {{0, 6, 2, 1}};
  // +2 px/s pushes (6,2) to x=8 > 7 at the final reference only.
  const FlowSequence flows = constant_flow(8, 8, 0, 1'000'000, 1, {{2.0, 0.0}});
  const ForwardResult fwd = build_iwe_stack(s, flows);
  EXPECT_TRUE(fwd.loss.no_survivors);
  EXPECT_EQ(fwd.traj.n_alive, 0u);
  for (int r = 0; r < 2; ++r)
    EXPECT_EQ(fwd.stack.n_active[static_cast<std::size_t>(r)], 0);
}

TEST(IweStack, MassConservationPerReference) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const FdInstance inst = evcm_test::random_fd_instance(100 + trial);
    const ForwardResult fwd = build_iwe_stack(inst.slice, inst.flows);
    for (int r = 0; r < fwd.stack.n_refs; ++r) {
      double mass = 0.0;
      for (int c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < fwd.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].size(); ++i)
          mass += fwd.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)][i];
      EXPECT_NEAR(mass, static_cast<double>(fwd.traj.n_alive),
                  1e-9 * std::max(1.0, static_cast<double>(fwd.traj.n_alive)));
    }
  }
}

TEST(IweStack, TrajectoryMatchesWarpEventAtEveryReference) {
  const FdInstance inst = evcm_test::random_fd_instance(42);
  const ForwardResult fwd = build_iwe_stack(inst.slice, inst.flows);
  const int B = inst.flows.n_bins();
  for (std::size_t k = 0; k < inst.slice.events.size(); ++k) {
    const Event& e = inst.slice.events[k];
    const double t_rel = inst.flows.rel_s(e.t_us);
    for (int r = 0; r <= B; ++r) {
      const Vec2 direct = warp_event({static_cast<double>(e.x), static_cast<double>(e.y)},
                                     t_rel, inst.flows.edge_rel_s(r), inst.flows);
      const Vec2 stored = fwd.traj.position(k, r);
      EXPECT_EQ(direct.x, stored.x);
      EXPECT_EQ(direct.y, stored.y);
    }
  }
}

TEST(ContrastLoss, TrueFlowBeatsZeroFlowOnLinearTrajectory) {
  // Five events along a moving edge: x(t) = 2 + 40 t.
  EventSlice s;
  s.width = 12;
  s.height = 8;
  s.t_start_us = 0;
  s.t_end_us = 100'000;
  for (int k = 0; k < 5; ++k) {
    Event e;
    e.t_us = static_cast<std::uint64_t>(k) * 20'000;
    e.x = static_cast<std::uint16_t>(2 + (80 * k) / 100);  // round(40 * t)
    e.y = 4;
    e.p = 1;
    s.events.push_back(e);
  }
  const FlowSequence truth = constant_flow(12, 8, 0, 100'000, 2, {{40, 0}, {40, 0}});
  const FlowSequence zero = truth.zeros_like();
  const double loss_truth = build_iwe_stack(s, truth).loss.value;
  const double loss_zero = build_iwe_stack(s, zero).loss.value;
  EXPECT_LT(loss_truth, loss_zero);
  EXPECT_LT(rsat(s, truth), 1.0);
  EXPECT_DOUBLE_EQ(rsat(s, zero), 1.0);
}

TEST(Rsat, EmptySliceIsAnError) {
  EventSlice s;
  s.width = 8;
  s.height = 8;
  s.t_end_us = 1000;
  const FlowSequence flows = FlowSequence::zeros(8, 8, 0, 1000, 1);
  EXPECT_THROW(rsat(s, flows), EmptySliceError);
}

TEST(Backward, EmptySliceGivesZeroBuffer) {
  EventSlice s;
  s.width = 8;
  s.height = 8;
  s.t_end_us = 1000;
  const FlowSequence flows = FlowSequence::zeros(8, 8, 0, 1000, 2);
  const GradientBuffer g = contrast_loss_backward(s, flows);
  for (int b = 0; b < g.n_bins(); ++b)
    for (std::size_t i = 0; i < g.gu[static_cast<std::size_t>(b)].size(); ++i) {
      EXPECT_EQ(g.gu[static_cast<std::size_t>(b)][i], 0.0);
      EXPECT_EQ(g.gv[static_cast<std::size_t>(b)][i], 0.0);
    }
}

TEST(Backward, GradientSupportLimitedToTrajectoryStencils) {
  const FdInstance inst = evcm_test::random_fd_instance(7);
  const Engine engine{};
  const auto [fwd, bwd] = engine.loss_and_grad(inst.slice, inst.flows);
  const int B = inst.flows.n_bins();
  std::vector<double> edges(static_cast<std::size_t>(B) + 1);
  for (int i = 0; i <= B; ++i) edges[static_cast<std::size_t>(i)] = inst.flows.edge_rel_s(i);

  // Collect, per bin, the cells each surviving event's warp SAMPLES from
  // (those are the only cells its gradient can reach).
  std::vector<std::set<std::pair<int, int>>> touched(static_cast<std::size_t>(B));
  const auto mark = [&](int bin, Vec2 at) {
    const BilinCell c = bilin_cell(at.x, at.y, inst.slice.width, inst.slice.height);
    auto& s = touched[static_cast<std::size_t>(bin)];
    s.insert({c.x0, c.y0});
    s.insert({c.x1, c.y0});
    s.insert({c.x0, c.y1});
    s.insert({c.x1, c.y1});
  };
  for (std::size_t k = 0; k < inst.slice.events.size(); ++k) {
    if (!fwd.traj.alive[k]) continue;
    const Event& e = inst.slice.events[k];
    const int j = fwd.traj.bin[k];
    const Vec2 x0{static_cast<double>(e.x), static_cast<double>(e.y)};
    mark(j, x0);  // both partial steps sample at the source pixel
    for (int i = 0; i <= j - 1; ++i) mark(i, fwd.traj.position(k, i + 1));
    for (int i = j + 1; i <= B - 1; ++i) mark(i, fwd.traj.position(k, i));
  }
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < inst.slice.height; ++y)
      for (int x = 0; x < inst.slice.width; ++x)
        if (!touched[static_cast<std::size_t>(b)].count({x, y})) {
          EXPECT_EQ(bwd.grad.gu[static_cast<std::size_t>(b)].at(x, y), 0.0)
              << "bin " << b << " cell " << x << "," << y;
          EXPECT_EQ(bwd.grad.gv[static_cast<std::size_t>(b)].at(x, y), 0.0);
        }
}

TEST(Backward, FiniteDifferenceAgreementSmallInstances) {
  for (int trial = 0; trial < 8; ++trial) {
    FdInstanceParams p;
    p.max_events = 20;
    p.max_dim = 10;
    const FdInstance inst = evcm_test::random_fd_instance(500 + trial, p);
    const evcm_test::FdCheck chk = evcm_test::fd_check_flow_gradient(inst.slice, inst.flows);
    EXPECT_LT(chk.max_rel_err, 1e-4) << "trial " << trial;
    EXPECT_GT(chk.max_abs_grad, 0.0);
  }
}

TEST(Backward, FiniteDifferenceAgreementWithMaskedEvents) {
  FdInstanceParams p;
  p.max_events = 24;
  p.want_masked = true;
  for (int trial = 0; trial < 4; ++trial) {
    const FdInstance inst = evcm_test::random_fd_instance(900 + trial, p);
    ASSERT_GT(inst.n_masked, 0u);
    const evcm_test::FdCheck chk = evcm_test::fd_check_flow_gradient(inst.slice, inst.flows);
    EXPECT_LT(chk.max_rel_err, 1e-4) << "trial " << trial;
  }
}

TEST(MaskingMonotonicity, SmallerSensorNeverRevivesEvents) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const int W = 16, H = 12;
    EventSlice big;
    big.width = W;
    big.height = H;
    big.t_start_us = 0;
    big.t_end_us = 100'000;
    std::uniform_int_distribution<int> xd(0, W - 5), yd(0, H - 4);
    std::vector<std::uint64_t> ts(40);
    std::uniform_int_distribution<std::uint64_t> td(0, 99'999);
    for (auto& t : ts) t = td(rng);
    std::sort(ts.begin(), ts.end());
    for (std::uint64_t t : ts)
      big.events.push_back({t, static_cast<std::uint16_t>(xd(rng)),
                            static_cast<std::uint16_t>(yd(rng)), 1});
    std::uniform_real_distribution<double> fv(-40.0, 40.0);
    const Vec2 f0{fv(rng), fv(rng)}, f1{fv(rng), fv(rng)};
    const FlowSequence flow_big = constant_flow(W, H, 0, 100'000, 2, {f0, f1});
    const FlowSequence flow_small = constant_flow(W - 4, H - 3, 0, 100'000, 2, {f0, f1});
    EventSlice small = big;
    small.width = W - 4;
    small.height = H - 3;
    const ForwardResult rb = build_iwe_stack(big, flow_big);
    const ForwardResult rs = build_iwe_stack(small, flow_small);
    for (std::size_t k = 0; k < big.events.size(); ++k) {
      if (rs.traj.alive[k]) {
        EXPECT_TRUE(rb.traj.alive[k]) << "event " << k;
      }
    }
  }
}

TEST(Backends, ForwardBitIdenticalAcrossAllThree) {
  for (int trial = 0; trial < 6; ++trial) {
    FdInstanceParams p;
    p.max_events = 50;
    const FdInstance inst = evcm_test::random_fd_instance(1300 + trial, p);
    EngineOptions naive_o, padded_o, parallel_o;
    naive_o.backend = Backend::naive;
    padded_o.backend = Backend::padded;
    padded_o.batch_size = 16;
    parallel_o.backend = Backend::parallel;
    parallel_o.n_workers = 4;
    parallel_o.min_events_per_worker = 1;
    const ForwardResult a = Engine(naive_o).forward(inst.slice, inst.flows);
    const ForwardResult b = Engine(padded_o).forward(inst.slice, inst.flows);
    const ForwardResult c = Engine(parallel_o).forward(inst.slice, inst.flows);
    EXPECT_EQ(a.loss.value, b.loss.value);
    EXPECT_EQ(a.loss.value, c.loss.value);
    for (int r = 0; r < a.stack.n_refs; ++r) {
      EXPECT_EQ(a.stack.n_active[static_cast<std::size_t>(r)],
                c.stack.n_active[static_cast<std::size_t>(r)]);
      for (int ch = 0; ch < 2; ++ch) {
        const auto& ia = a.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(ch)];
        const auto& ib = b.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(ch)];
        const auto& ic = c.stack.count[static_cast<std::size_t>(r)][static_cast<std::size_t>(ch)];
        EXPECT_EQ(ia, ib);
        EXPECT_EQ(ia, ic);
      }
    }
  }
}

TEST(Backends, GradientsAgreeAndDeterministicModeIsBitStable) {
  for (int trial = 0; trial < 4; ++trial) {
    const FdInstance inst = evcm_test::random_fd_instance(1700 + trial);
    EngineOptions naive_o, padded_o, par_o, fast_o;
    naive_o.backend = Backend::naive;
    padded_o.backend = Backend::padded;
    padded_o.batch_size = 32;
    par_o.backend = Backend::parallel;
    par_o.n_workers = 4;
    par_o.min_events_per_worker = 1;
    fast_o = par_o;
    fast_o.deterministic = false;

    const Engine en(naive_o), ep(padded_o), ec(par_o), ef(fast_o);
    const GradientBuffer gn = contrast_loss_backward(inst.slice, inst.flows, naive_o);
    const GradientBuffer gp = contrast_loss_backward(inst.slice, inst.flows, padded_o);
    const GradientBuffer gc1 = contrast_loss_backward(inst.slice, inst.flows, par_o);
    const GradientBuffer gc2 = contrast_loss_backward(inst.slice, inst.flows, par_o);
    const GradientBuffer gf = contrast_loss_backward(inst.slice, inst.flows, fast_o);

    double norm = 0.0;
    for (int b = 0; b < gn.n_bins(); ++b)
      for (std::size_t i = 0; i < gn.gu[static_cast<std::size_t>(b)].size(); ++i) {
        norm = std::max(norm, std::abs(gn.gu[static_cast<std::size_t>(b)][i]));
        norm = std::max(norm, std::abs(gn.gv[static_cast<std::size_t>(b)][i]));
      }
    ASSERT_GT(norm, 0.0);
    for (int b = 0; b < gn.n_bins(); ++b)
      for (std::size_t i = 0; i < gn.gu[static_cast<std::size_t>(b)].size(); ++i) {
        // Padded accumulates in the exact event order: identical bits.
        EXPECT_EQ(gn.gu[static_cast<std::size_t>(b)][i], gp.gu[static_cast<std::size_t>(b)][i]);
        EXPECT_EQ(gn.gv[static_cast<std::size_t>(b)][i], gp.gv[static_cast<std::size_t>(b)][i]);
        // Deterministic parallel: bit-stable across runs.
        EXPECT_EQ(gc1.gu[static_cast<std::size_t>(b)][i], gc2.gu[static_cast<std::size_t>(b)][i]);
        EXPECT_EQ(gc1.gv[static_cast<std::size_t>(b)][i], gc2.gv[static_cast<std::size_t>(b)][i]);
        // Across backends / fast mode: equal to rounding.
        EXPECT_NEAR(gn.gu[static_cast<std::size_t>(b)][i], gc1.gu[static_cast<std::size_t>(b)][i], 1e-8 * norm);
        EXPECT_NEAR(gn.gv[static_cast<std::size_t>(b)][i], gc1.gv[static_cast<std::size_t>(b)][i], 1e-8 * norm);
        EXPECT_NEAR(gn.gu[static_cast<std::size_t>(b)][i], gf.gu[static_cast<std::size_t>(b)][i], 1e-8 * norm);
        EXPECT_NEAR(gn.gv[static_cast<std::size_t>(b)][i], gf.gv[static_cast<std::size_t>(b)][i], 1e-8 * norm);
      }
  }
}

TEST(Backends, PaddingFractionChangesNothingNumerically) {
  FdInstance inst = evcm_test::random_fd_instance(2500);
  for (std::uint64_t seed = 2501; inst.slice.events.size() < 8; ++seed)
    inst = evcm_test::random_fd_instance(seed);
  EngineOptions a, b;
  a.backend = Backend::padded;
  a.batch_size = 8;
  b = a;
  b.padding_fraction = 2.0;
  const ForwardResult fa = Engine(a).forward(inst.slice, inst.flows);
  const ForwardResult fb = Engine(b).forward(inst.slice, inst.flows);
  EXPECT_EQ(fa.loss.value, fb.loss.value);
  EXPECT_GT(fb.tape.n_slots, fa.tape.n_slots);
  const GradientBuffer ga = contrast_loss_backward(inst.slice, inst.flows, a);
  const GradientBuffer gb = contrast_loss_backward(inst.slice, inst.flows, b);
  for (int bin = 0; bin < ga.n_bins(); ++bin)
    for (std::size_t i = 0; i < ga.gu[static_cast<std::size_t>(bin)].size(); ++i) {
      EXPECT_EQ(ga.gu[static_cast<std::size_t>(bin)][i], gb.gu[static_cast<std::size_t>(bin)][i]);
      EXPECT_EQ(ga.gv[static_cast<std::size_t>(bin)][i], gb.gv[static_cast<std::size_t>(bin)][i]);
    }
}
