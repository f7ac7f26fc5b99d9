// evcm: command-line front end for the event-camera contrast-maximization
// toolkit. Subcommands cover synthetic scene generation, flow recovery from
// an event stream, depth evaluation, backend benchmarking, closed-loop
// navigation simulation, and a finite-difference gradient self-check.
//
// Exit codes: 0 success, 1 domain failure (unreadable data, failed check,
// diverged run), 2 usage error (bad flags, malformed config, unknown keys).

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "evcm/bench.hpp"
#include "evcm/control.hpp"
#include "evcm/fdcheck.hpp"
#include "evcm/io.hpp"
#include "evcm/metrics.hpp"
#include "evcm/optimize.hpp"
#include "evcm/synth.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

// Invocation- or config-level mistake; reported with schema help, exit 2.
struct UsageError {
  std::string message;
};

// ---- strict JSON helpers ----------------------------------------------------

json load_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError{what + ": cannot open " + path.string()};
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError{what + ": " + path.string() + " is not valid JSON (" + e.what() + ")"};
  }
}

void require_object(const json& j, const std::string& what) {
  if (!j.is_object()) throw UsageError{what + " must be a JSON object"};
}

// Unknown keys are rejected so that typos cannot silently fall back to
// defaults.
void check_keys(const json& j, const std::string& what,
                std::initializer_list<const char*> allowed) {
  require_object(j, what);
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) {
      std::string keys;
      for (const char* k : allowed) {
        if (!keys.empty()) keys += ", ";
        keys += k;
      }
      throw UsageError{what + ": unknown key \"" + item.key() + "\" (allowed: " + keys + ")"};
    }
  }
}

double num_field(const json& j, const char* key, double def, const std::string& what) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) throw UsageError{what + "." + key + " must be a number"};
  return v.get<double>();
}

double require_num(const json& j, const char* key, const std::string& what) {
  if (!j.contains(key)) throw UsageError{what + "." + key + " is required"};
  return num_field(j, key, 0.0, what);
}

long long int_field(const json& j, const char* key, long long def, const std::string& what) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw UsageError{what + "." + key + " must be an integer"};
  return v.get<long long>();
}

long long require_int(const json& j, const char* key, const std::string& what) {
  if (!j.contains(key)) throw UsageError{what + "." + key + " is required"};
  return int_field(j, key, 0, what);
}

std::uint64_t uint_field(const json& j, const char* key, std::uint64_t def,
                         const std::string& what) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
    throw UsageError{what + "." + key + " must be a non-negative integer"};
  return v.get<std::uint64_t>();
}

std::string str_field(const json& j, const char* key, const std::string& def,
                      const std::string& what) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) throw UsageError{what + "." + key + " must be a string"};
  return v.get<std::string>();
}

evcm::Vec3 parse_vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3)
    throw UsageError{what + " must be an array of 3 numbers"};
  for (const json& c : j)
    if (!c.is_number()) throw UsageError{what + " must be an array of 3 numbers"};
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

evcm::PoseStep parse_pose(const json& j, const std::string& what) {
  check_keys(j, what, {"omega", "trans"});
  evcm::PoseStep p;
  if (j.contains("omega")) p.omega = parse_vec3(j.at("omega"), what + ".omega");
  if (j.contains("trans")) p.trans = parse_vec3(j.at("trans"), what + ".trans");
  return p;
}

// ---- config schemas ----------------------------------------------------------

evcm::SceneSpec parse_scene_spec(const json& j) {
  const std::string what = "scene spec";
  check_keys(j, what,
             {"width", "height", "planes", "trajectory", "intrinsics", "event_rate",
              "duration_s", "seed"});
  evcm::SceneSpec spec;
  spec.width = static_cast<int>(int_field(j, "width", spec.width, what));
  spec.height = static_cast<int>(int_field(j, "height", spec.height, what));
  spec.event_rate = num_field(j, "event_rate", spec.event_rate, what);
  spec.duration_s = num_field(j, "duration_s", spec.duration_s, what);
  spec.seed = uint_field(j, "seed", spec.seed, what);

  if (!j.contains("planes") || !j.at("planes").is_array())
    throw UsageError{what + ".planes must be an array of plane objects"};
  for (const json& pj : j.at("planes")) {
    const std::string pw = what + ".planes[]";
    check_keys(pj, pw, {"depth", "x0", "y0", "x1", "y1", "feature_density"});
    evcm::PlaneSpec p;
    p.depth = require_num(pj, "depth", pw);
    p.x0 = static_cast<int>(require_int(pj, "x0", pw));
    p.y0 = static_cast<int>(require_int(pj, "y0", pw));
    p.x1 = static_cast<int>(require_int(pj, "x1", pw));
    p.y1 = static_cast<int>(require_int(pj, "y1", pw));
    p.feature_density = num_field(pj, "feature_density", p.feature_density, pw);
    spec.planes.push_back(p);
  }

  if (!j.contains("trajectory") || !j.at("trajectory").is_array())
    throw UsageError{what + ".trajectory must be an array of pose objects"};
  for (const json& tj : j.at("trajectory"))
    spec.trajectory.push_back(parse_pose(tj, what + ".trajectory[]"));

  if (j.contains("intrinsics")) {
    const json& kj = j.at("intrinsics");
    const std::string kw = what + ".intrinsics";
    check_keys(kj, kw, {"fx", "fy", "cx", "cy"});
    spec.k.fx = require_num(kj, "fx", kw);
    spec.k.fy = require_num(kj, "fy", kw);
    spec.k.cx = require_num(kj, "cx", kw);
    spec.k.cy = require_num(kj, "cy", kw);
  }
  return spec;
}

evcm::OptimizerConfig parse_optimizer_config(const json& j) {
  const std::string what = "optimizer config";
  check_keys(j, what,
             {"learning_rate", "steps_per_update", "bins", "lambda_geo", "backend",
              "seed", "max_updates"});
  evcm::OptimizerConfig cfg;
  cfg.learning_rate = num_field(j, "learning_rate", cfg.learning_rate, what);
  cfg.steps_per_update =
      static_cast<int>(int_field(j, "steps_per_update", cfg.steps_per_update, what));
  cfg.bins = static_cast<int>(int_field(j, "bins", cfg.bins, what));
  cfg.lambda_geo = num_field(j, "lambda_geo", cfg.lambda_geo, what);
  cfg.backend = str_field(j, "backend", cfg.backend, what);
  cfg.seed = uint_field(j, "seed", cfg.seed, what);
  cfg.max_updates = static_cast<int>(int_field(j, "max_updates", cfg.max_updates, what));
  return cfg;
}

evcm::ControllerParams parse_controller(const json& j) {
  const std::string what = "nav params.controller";
  check_keys(j, what, {"bins", "lambda_goal", "lambda_avoid", "alpha", "sigma"});
  evcm::ControllerParams p;
  p.bins = static_cast<int>(int_field(j, "bins", p.bins, what));
  p.lambda_goal = num_field(j, "lambda_goal", p.lambda_goal, what);
  p.lambda_avoid = num_field(j, "lambda_avoid", p.lambda_avoid, what);
  p.alpha = num_field(j, "alpha", p.alpha, what);
  p.sigma = num_field(j, "sigma", p.sigma, what);
  return p;
}

evcm::NavConfig parse_nav_params(const json& j) {
  const std::string what = "nav params";
  check_keys(j, what,
             {"controller", "speed_mps", "dt_s", "steps", "start_x_m", "start_y_m",
              "start_psi_rad", "heading_jitter_rad", "intervene_below_m",
              "rearm_above_m", "max_yaw_rate_rad_s", "depth_columns", "fov_rad",
              "max_range_m", "depth_scale_noise"});
  evcm::NavConfig cfg;
  if (j.contains("controller")) cfg.controller = parse_controller(j.at("controller"));
  cfg.speed_mps = num_field(j, "speed_mps", cfg.speed_mps, what);
  cfg.dt_s = num_field(j, "dt_s", cfg.dt_s, what);
  cfg.steps = static_cast<int>(int_field(j, "steps", cfg.steps, what));
  cfg.start_x_m = num_field(j, "start_x_m", cfg.start_x_m, what);
  cfg.start_y_m = num_field(j, "start_y_m", cfg.start_y_m, what);
  cfg.start_psi_rad = num_field(j, "start_psi_rad", cfg.start_psi_rad, what);
  cfg.heading_jitter_rad = num_field(j, "heading_jitter_rad", cfg.heading_jitter_rad, what);
  cfg.intervene_below_m = num_field(j, "intervene_below_m", cfg.intervene_below_m, what);
  cfg.rearm_above_m = num_field(j, "rearm_above_m", cfg.rearm_above_m, what);
  cfg.max_yaw_rate_rad_s = num_field(j, "max_yaw_rate_rad_s", cfg.max_yaw_rate_rad_s, what);
  cfg.depth_columns = static_cast<int>(int_field(j, "depth_columns", cfg.depth_columns, what));
  cfg.fov_rad = num_field(j, "fov_rad", cfg.fov_rad, what);
  cfg.max_range_m = num_field(j, "max_range_m", cfg.max_range_m, what);
  cfg.depth_scale_noise = num_field(j, "depth_scale_noise", cfg.depth_scale_noise, what);
  return cfg;
}

// ---- file plumbing -----------------------------------------------------------

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw evcm::IoError("cannot create output directory " + dir.string());
}

std::string bin_suffix(int b) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", b);
  return buf;
}

// Depth maps travel as PFM with invalid pixels stored as 0 (valid depth is
// strictly positive, so 0 is unambiguous).
void write_depth_pfm(const evcm::DepthMap& depth, const fs::path& path) {
  evcm::Image<float> img(depth.width(), depth.height(), 0.0f);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x)
      if (depth.is_valid(x, y)) img.at(x, y) = static_cast<float>(depth.d.at(x, y));
  evcm::write_pfm(img, path);
}

evcm::DepthMap depth_from_pfm(const fs::path& path) {
  const evcm::Image<float> img = evcm::read_pfm(path);
  evcm::Image<double> d(img.width(), img.height(), 1.0);
  evcm::Image<std::uint8_t> valid(img.width(), img.height(), 0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const float v = img.at(x, y);
      if (std::isfinite(v) && v > 0.0f) {
        d.at(x, y) = static_cast<double>(v);
        valid.at(x, y) = 1;
      }
    }
  return {std::move(d), std::move(valid)};
}

void write_mask_pgm(const evcm::Image<std::uint8_t>& mask, const fs::path& path) {
  evcm::Image<std::uint8_t> img(mask.width(), mask.height(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) img[i] = mask[i] ? 255 : 0;
  evcm::write_pgm(img, path);
}

void write_flow_sequence(const evcm::FlowSequence& flows, const fs::path& dir,
                         const std::string& stem) {
  for (int b = 0; b < flows.n_bins(); ++b) {
    const std::string s = bin_suffix(b);
    evcm::write_flow_pfm(flows.fields[static_cast<std::size_t>(b)],
                         dir / (stem + "_u_" + s + ".pfm"),
                         dir / (stem + "_v_" + s + ".pfm"));
  }
}

// ---- subcommands ---------------------------------------------------------------

int run_synth(const fs::path& spec_path, const fs::path& out_dir) {
  const evcm::SceneSpec spec = parse_scene_spec(load_json(spec_path, "scene spec"));
  const evcm::SceneData scene = evcm::generate_scene(spec);
  ensure_dir(out_dir);

  evcm::write_events(scene.events, out_dir / "events.evt1");
  write_depth_pfm(scene.depth, out_dir / "depth_gt.pfm");
  write_flow_sequence(scene.flow, out_dir, "flow_gt");
  for (std::size_t b = 0; b < scene.flow_valid.size(); ++b)
    write_mask_pgm(scene.flow_valid[b],
                   out_dir / ("flow_valid_" + bin_suffix(static_cast<int>(b)) + ".pgm"));

  std::cout << "synth: " << scene.events.events.size() << " events, "
            << scene.flow.n_bins() << " bins, " << scene.n_features
            << " features -> " << out_dir.string() << "\n";
  return kExitOk;
}

int run_optimize(const fs::path& events_path, const fs::path& config_path,
                 const fs::path& out_dir, bool timings) {
  evcm::OptimizerConfig cfg;
  if (!config_path.empty())
    cfg = parse_optimizer_config(load_json(config_path, "optimizer config"));
  const evcm::EventSlice slice = evcm::read_events(events_path);

  const evcm::FlowOnlyResult result = evcm::optimize_flow_only(slice, cfg.bins, cfg);
  ensure_dir(out_dir);
  result.log.write_csv(out_dir / "train_log.csv", timings);
  write_flow_sequence(result.flows, out_dir, "flow");

  if (result.log.records.empty()) {
    std::cout << "optimize: no updates requested\n";
  } else {
    const evcm::TrainRecord& last = result.log.records.back();
    std::cout << "optimize: " << result.log.records.size() << " updates, final total loss "
              << evcm::format_number(last.total) << ", rsat "
              << evcm::format_number(last.rsat) << " -> " << out_dir.string() << "\n";
  }
  return kExitOk;
}

int run_eval(const fs::path& pred_path, const fs::path& gt_path, const fs::path& events_path,
             const std::vector<double>& cutoffs, const std::string& scale_mode, double fx,
             double baseline, const fs::path& out_dir) {
  const evcm::DepthMap pred = depth_from_pfm(pred_path);
  const evcm::DepthMap gt = depth_from_pfm(gt_path);

  evcm::EvalConfig cfg;
  if (!cutoffs.empty()) cfg.cutoffs = cutoffs;
  cfg.scale_mode = scale_mode == "best" ? evcm::ScaleMode::best : evcm::ScaleMode::approx;
  cfg.fx = fx;
  cfg.baseline = baseline;

  evcm::EventSlice slice;
  const bool masked = !events_path.empty();
  if (masked) slice = evcm::read_events(events_path);

  const evcm::EvalReport report =
      evcm::evaluate_depth(pred, gt, masked ? &slice : nullptr, cfg);
  ensure_dir(out_dir);
  report.write_csv(out_dir / "report.csv");
  report.write_json(out_dir / "report.json");

  for (const evcm::EvalRow& r : report.rows)
    std::cout << "eval: cutoff " << evcm::format_number(r.cutoff) << " "
              << (r.event_masked ? "masked" : "dense") << " n=" << r.n_pixels
              << " scale=" << evcm::format_number(r.scale)
              << " mae=" << evcm::format_number(r.mae)
              << " p1%=" << evcm::format_number(r.disparity.p1) << "\n";
  return kExitOk;
}

int run_bench(const std::vector<std::uint64_t>& counts, double padding, int reps,
              const std::vector<std::string>& backends, int workers,
              std::uint64_t min_per_worker, std::uint64_t seed, const fs::path& out_csv) {
  evcm::BenchConfig cfg;
  if (!counts.empty()) {
    cfg.event_counts.clear();
    for (std::uint64_t c : counts) cfg.event_counts.push_back(static_cast<std::size_t>(c));
  }
  cfg.padding_fraction = padding;
  cfg.repetitions = reps;
  if (!backends.empty()) {
    cfg.backends.clear();
    for (const std::string& b : backends) cfg.backends.push_back(evcm::backend_from_name(b));
  }
  cfg.n_workers = workers;
  cfg.min_events_per_worker = static_cast<std::size_t>(min_per_worker);
  cfg.seed = seed;

  const evcm::BenchReport report = evcm::run_bench(cfg);
  if (out_csv.has_parent_path()) ensure_dir(out_csv.parent_path());
  report.write_csv(out_csv);
  std::cout << "bench: " << report.rows.size() << " rows -> " << out_csv.string() << "\n";
  return kExitOk;
}

int run_navsim(const fs::path& scene_path, double cell_m, int seeds,
               const fs::path& params_path, const fs::path& out_dir) {
  if (seeds < 1) throw UsageError{"navsim: --seeds must be >= 1"};
  evcm::NavConfig cfg;
  if (!params_path.empty()) cfg = parse_nav_params(load_json(params_path, "nav params"));
  const evcm::OccupancyGrid grid = evcm::occupancy_from_pgm(scene_path, cell_m);
  ensure_dir(out_dir);

  evcm::CsvWriter summary(out_dir / "summary.csv",
                          {"seed", "interventions", "distance_m",
                           "mean_distance_between_interventions_m", "saw_empty_view"});
  double mean_of_means = 0.0;
  int total_interventions = 0;
  for (int s = 1; s <= seeds; ++s) {
    cfg.seed = static_cast<std::uint64_t>(s);
    const evcm::NavResult result = evcm::navsim(grid, cfg);
    char name[48];
    std::snprintf(name, sizeof(name), "trajectory_seed_%03d.csv", s);
    result.write_csv(out_dir / name);
    summary.write_row({std::to_string(s), std::to_string(result.interventions),
                       evcm::format_number(result.distance_m),
                       evcm::format_number(result.mean_distance_between_interventions()),
                       result.saw_empty_view ? "1" : "0"});
    mean_of_means += result.mean_distance_between_interventions();
    total_interventions += result.interventions;
  }
  mean_of_means /= static_cast<double>(seeds);

  std::cout << "navsim: " << seeds << " seeds, " << total_interventions
            << " interventions, mean distance between interventions "
            << evcm::format_number(mean_of_means) << " m -> " << out_dir.string() << "\n";
  return kExitOk;
}

int run_gradcheck(std::uint64_t seed, int trials, const std::string& backend,
                  double tolerance) {
  if (trials < 1) throw UsageError{"gradcheck: --trials must be >= 1"};
  evcm::EngineOptions opts;
  opts.backend = evcm::backend_from_name(backend);

  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    evcm::FdInstanceParams params;
    params.want_masked = (t % 2) == 1;  // alternate plain and boundary-masked cases
    const evcm::FdInstance inst = evcm::random_fd_instance(seed + static_cast<std::uint64_t>(t), params);
    const evcm::FdCheck check = evcm::fd_check_flow_gradient(inst.slice, inst.flows, opts);
    worst = std::max(worst, check.max_rel_err);
  }

  const bool pass = worst <= tolerance;
  std::cout << (pass ? "PASS" : "FAIL") << ": max relative error "
            << evcm::format_number(worst) << " over " << trials
            << (trials == 1 ? " trial" : " trials") << " (tolerance "
            << evcm::format_number(tolerance) << ", backend " << backend << ")\n";
  return pass ? kExitOk : kExitDomain;
}

// ---- schema help ---------------------------------------------------------------

const char* kSynthSchema =
    "scene spec JSON:\n"
    "  {\"width\": int, \"height\": int,\n"
    "   \"planes\": [{\"depth\": num, \"x0\": int, \"y0\": int, \"x1\": int, \"y1\": int,\n"
    "               \"feature_density\": num?}, ...],\n"
    "   \"trajectory\": [{\"omega\": [num,num,num]?, \"trans\": [num,num,num]?}, ...],\n"
    "   \"intrinsics\": {\"fx\": num, \"fy\": num, \"cx\": num, \"cy\": num}?,\n"
    "   \"event_rate\": num?, \"duration_s\": num?, \"seed\": int?}\n"
    "Writes events.evt1, depth_gt.pfm, flow_gt_{u,v}_NN.pfm, flow_valid_NN.pgm.";

const char* kOptimizeSchema =
    "optimizer config JSON (all keys optional):\n"
    "  {\"learning_rate\": num, \"steps_per_update\": int, \"bins\": int,\n"
    "   \"lambda_geo\": num, \"backend\": \"naive\"|\"padded\"|\"parallel\",\n"
    "   \"seed\": int, \"max_updates\": int}\n"
    "Writes train_log.csv and flow_{u,v}_NN.pfm.";

const char* kNavsimSchema =
    "nav params JSON (all keys optional):\n"
    "  {\"controller\": {\"bins\": int, \"lambda_goal\": num, \"lambda_avoid\": num,\n"
    "                  \"alpha\": num, \"sigma\": num},\n"
    "   \"speed_mps\": num, \"dt_s\": num, \"steps\": int,\n"
    "   \"start_x_m\": num, \"start_y_m\": num, \"start_psi_rad\": num,\n"
    "   \"heading_jitter_rad\": num, \"intervene_below_m\": num, \"rearm_above_m\": num,\n"
    "   \"max_yaw_rate_rad_s\": num, \"depth_columns\": int, \"fov_rad\": num,\n"
    "   \"max_range_m\": num, \"depth_scale_noise\": num}\n"
    "Writes trajectory_seed_NNN.csv per seed and summary.csv.";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"event-camera contrast maximization toolkit"};
  app.require_subcommand(1);

  // synth
  std::string synth_spec, synth_out;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic event stream with ground truth");
  synth->add_option("--spec", synth_spec, "scene spec JSON file")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->footer(kSynthSchema);

  // optimize
  std::string opt_events, opt_config, opt_out;
  bool opt_timings = false;
  CLI::App* optimize = app.add_subcommand("optimize", "recover per-bin flow from an event stream");
  optimize->add_option("--events", opt_events, "input EVT1 event file")->required();
  optimize->add_option("--config", opt_config, "optimizer config JSON file");
  optimize->add_option("--out", opt_out, "output directory")->required();
  optimize->add_flag("--timings", opt_timings,
                     "include wall-clock timings in train_log.csv (breaks byte reproducibility)");
  optimize->footer(kOptimizeSchema);

  // eval
  std::string eval_pred, eval_gt, eval_events, eval_scale = "approx", eval_out;
  std::vector<double> eval_cutoffs;
  double eval_fx = 100.0, eval_baseline = 0.1;
  CLI::App* eval = app.add_subcommand("eval", "score a predicted depth map against a reference");
  eval->add_option("--pred", eval_pred, "predicted depth PFM")->required();
  eval->add_option("--gt", eval_gt, "reference depth PFM")->required();
  eval->add_option("--events", eval_events, "optional EVT1 file restricting metrics to event pixels");
  eval->add_option("--cutoffs", eval_cutoffs, "depth cutoffs in meters (default 10,20,30)")
      ->delimiter(',');
  eval->add_option("--scale", eval_scale, "scale alignment mode")
      ->check(CLI::IsMember({"approx", "best"}));
  eval->add_option("--fx", eval_fx, "focal length for disparity metrics");
  eval->add_option("--baseline", eval_baseline, "stereo baseline for disparity metrics");
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->footer("Writes report.csv and report.json.");

  // bench
  std::vector<std::uint64_t> bench_counts;
  std::vector<std::string> bench_backends;
  double bench_padding = 0.10;
  int bench_reps = 20, bench_workers = 0;
  std::uint64_t bench_min_per_worker = 4096, bench_seed = 1;
  std::string bench_out;
  CLI::App* bench = app.add_subcommand("bench", "time the warp/splat/loss/backward phases per backend");
  bench->add_option("--counts", bench_counts, "event counts to sweep (default 1000,10000)")
      ->delimiter(',');
  bench->add_option("--padding", bench_padding, "padding fraction for the padded backend");
  bench->add_option("--reps", bench_reps, "timed repetitions per cell");
  bench->add_option("--backends", bench_backends, "backends to run (default all)")
      ->delimiter(',')
      ->check(CLI::IsMember({"naive", "padded", "parallel"}));
  bench->add_option("--workers", bench_workers, "parallel backend worker count (0 = hardware)");
  bench->add_option("--min-per-worker", bench_min_per_worker,
                    "minimum events per worker before fanning out");
  bench->add_option("--seed", bench_seed, "seed for the synthetic workload");
  bench->add_option("--out", bench_out, "output CSV path")->required();
  bench->footer("CSV schema: backend,phase,n_events,time_us,peak_bytes,loss.");

  // navsim
  std::string nav_scene, nav_params, nav_out;
  double nav_cell = 0.1;
  int nav_seeds = 10;
  CLI::App* navsim = app.add_subcommand("navsim", "closed-loop avoidance simulation on an occupancy map");
  navsim->add_option("--scene", nav_scene, "occupancy PGM (pixels < 128 are obstacles)")->required();
  navsim->add_option("--cell", nav_cell, "grid cell size in meters");
  navsim->add_option("--seeds", nav_seeds, "number of seeds to run (1..N)");
  navsim->add_option("--params", nav_params, "nav params JSON file");
  navsim->add_option("--out", nav_out, "output directory")->required();
  navsim->footer(kNavsimSchema);

  // gradcheck
  std::uint64_t gc_seed = 7;
  int gc_trials = 3;
  std::string gc_backend = "parallel";
  double gc_tolerance = 1e-4;
  CLI::App* gradcheck = app.add_subcommand("gradcheck",
                                           "compare analytic flow gradients with finite differences");
  gradcheck->add_option("--seed", gc_seed, "base seed for the random instances");
  gradcheck->add_option("--trials", gc_trials, "number of random instances");
  gradcheck->add_option("--backend", gc_backend, "engine backend")
      ->check(CLI::IsMember({"naive", "padded", "parallel"}));
  gradcheck->add_option("--tolerance", gc_tolerance, "max allowed relative error");
  gradcheck->footer("Prints one PASS/FAIL line with the max relative error.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == synth) return run_synth(synth_spec, synth_out);
    if (active == optimize) return run_optimize(opt_events, opt_config, opt_out, opt_timings);
    if (active == eval)
      return run_eval(eval_pred, eval_gt, eval_events, eval_cutoffs, eval_scale, eval_fx,
                      eval_baseline, eval_out);
    if (active == bench)
      return run_bench(bench_counts, bench_padding, bench_reps, bench_backends, bench_workers,
                       bench_min_per_worker, bench_seed, bench_out);
    if (active == navsim) return run_navsim(nav_scene, nav_cell, nav_seeds, nav_params, nav_out);
    if (active == gradcheck) return run_gradcheck(gc_seed, gc_trials, gc_backend, gc_tolerance);
    std::cerr << "error: unknown subcommand\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.message << "\n\n" << active->help() << "\n";
    return kExitUsage;
  } catch (const evcm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help() << "\n";
    return kExitUsage;
  } catch (const evcm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}
