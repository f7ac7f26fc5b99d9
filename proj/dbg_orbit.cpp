#include <cmath>
#include <cstdio>
#include <vector>

#include "evcm/optimize.hpp"
#include "evcm/synth.hpp"

using namespace evcm;

static SceneData drift(int w, int h, int bins, double ux, double uy, double T,
                       double density, double rate, std::uint64_t seed) {
  SceneSpec s;
  s.width = w;
  s.height = h;
  s.k = CameraIntrinsics{0.9 * w, 0.9 * w, (w - 1) / 2.0, (h - 1) / 2.0};
  s.planes = {PlaneSpec{1.0, 0, 0, w, h, density}};
  s.duration_s = T;
  const double step_s = T / bins;
  s.trajectory.assign(bins, PoseStep{{0, 0, 0},
                                     {ux * step_s / s.k.fx, uy * step_s / s.k.fx, 0}});
  s.event_rate = rate;
  s.seed = seed;
  return generate_scene(s);
}

static void curve(const SceneData& scene, int bins, double lr, int max_updates,
                  bool from_gt, const char* tag) {
  const EventSlice& slice = scene.events;
  FlowSequence flows = from_gt ? scene.flow
                               : FlowSequence::zeros(slice.width, slice.height,
                                                     slice.t_start_us,
                                                     slice.t_end_us, bins);
  OptimizerConfig cfg;
  cfg.learning_rate = lr;
  Engine eng{cfg.engine_options()};
  const std::size_t cells = flows.fields.front().u.size();
  Adam adam(2 * flows.fields.size() * cells);
  std::vector<double*> slots;
  for (FlowField& f : flows.fields) {
    for (std::size_t i = 0; i < f.u.size(); ++i) slots.push_back(&f.u[i]);
    for (std::size_t i = 0; i < f.v.size(); ++i) slots.push_back(&f.v[i]);
  }
  Image<double> weight(slice.width, slice.height, 0.0);
  for (const Event& e : slice.events) weight.at(e.x, e.y) += 1.0;
  const double gu = scene.flow.fields[0].u.at(slice.width / 2, slice.height / 2);
  const double gv = scene.flow.fields[0].v.at(slice.width / 2, slice.height / 2);
  const double dt_bin = (slice.t_end_us - slice.t_start_us) * 1e-6 / bins;

  auto report = [&](int u, double loss) {
    double se = 0, su = 0, sv = 0, ws = 0;
    for (std::size_t b = 0; b < flows.fields.size(); ++b)
      for (std::size_t i = 0; i < cells; ++i) {
        if (weight[i] <= 0) continue;
        const double du = flows.fields[b].u[i] - scene.flow.fields[b].u[i];
        const double dv = flows.fields[b].v[i] - scene.flow.fields[b].v[i];
        se += weight[i] * std::sqrt(du * du + dv * dv);
        su += weight[i] * flows.fields[b].u[i];
        sv += weight[i] * flows.fields[b].v[i];
        ws += weight[i];
      }
    const double me = std::hypot(su / ws - gu, sv / ws - gv);
    std::printf("%s lr=%.3f u=%3d loss=%.5f epe_px=%6.4f meanerr=%5.1f%%\n", tag, lr,
                u, loss, se / ws * dt_bin, 100.0 * me / std::hypot(gu, gv));
    std::fflush(stdout);
  };

  for (int u = 0; u < max_updates; ++u) {
    const auto [fwd, bwd] = eng.loss_and_grad(slice, flows);
    if (u % 50 == 0) report(u, fwd.loss.value);
    std::vector<double> flat;
    flat.reserve(slots.size());
    for (std::size_t b = 0; b < flows.fields.size(); ++b) {
      for (std::size_t i = 0; i < cells; ++i) flat.push_back(bwd.grad.gu[b][i]);
      for (std::size_t i = 0; i < cells; ++i) flat.push_back(bwd.grad.gv[b][i]);
    }
    adam.step(slots, flat, cfg);
  }
  report(max_updates, eng.forward(slice, flows).loss.value);
}

int main() {
  const SceneData c = drift(32, 24, 9, 1.5, 1.17, 1.0, 0.05, 150, 91);
  std::printf("sceneC events=%zu\n", c.events.events.size());
  curve(c, 9, 0.05, 500, true, "C-fromGT");
  curve(c, 9, 0.03, 500, false, "C-zero");
  curve(c, 9, 0.05, 500, false, "C-zero");
  return 0;
}
