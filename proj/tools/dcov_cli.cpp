// dcov: command-line front end for the depth covariance engine.
//
// Exit codes: 0 success, 1 usage, 2 data/format/config, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dcov/ba.hpp"
#include "dcov/calib.hpp"
#include "dcov/config.hpp"
#include "dcov/fit.hpp"
#include "dcov/gp.hpp"
#include "dcov/io.hpp"
#include "dcov/parallel.hpp"
#include "dcov/photo.hpp"
#include "dcov/select.hpp"
#include "dcov/synth.hpp"

namespace fs = std::filesystem;
using namespace dcov;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;

  Config load() const { return config_path.empty() ? Config{} : load_config(config_path); }
};

KernelField field_or_default(const std::string& path, const Config& cfg) {
  if (!path.empty()) return io::to_kernel_field(io::read_pfm(path));
  return KernelField::isotropic(cfg.fit.grid_w, cfg.fit.grid_h, cfg.fit.initial_lengthscale);
}

// Hyperparameters and mean from a `fit` sidecar; an explicit --m still wins.
void apply_fit_sidecar(const std::string& path, Config& cfg, std::optional<double>* m) {
  if (path.empty()) return;
  const json::Json j = io::read_json(path);
  try {
    cfg.hyper.sigma_f_sq = j.at("sigma_f_sq").get<double>();
    cfg.hyper.sigma_n_sq = j.at("sigma_n_sq").get<double>();
    if (m && !*m) *m = j.at("m").get<double>();
  } catch (const json::Json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  cfg.hyper.validate();
}

fs::path out_dir(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

// complete ---------------------------------------------------------------------------

struct CompleteArgs {
  std::string fit_json;
  std::string obs, field, out_mean, out_var;
  int width = 0, height = 0;
  std::optional<double> m;
};

int run_complete(const Globals& g, CompleteArgs a) {
  Config cfg = g.load();
  apply_fit_sidecar(a.fit_json, cfg, &a.m);
  const auto obs = io::read_observations(a.obs);
  const KernelField field = field_or_default(a.field, cfg);
  double m = 0.0;
  if (a.m) {
    m = *a.m;
  } else if (obs.size() > 0) {
    m = optimal_scale(obs.y, factorize_observations(obs, field, cfg.hyper)).m;
  }
  const Posterior post = condition(obs, m, grid_coords(a.width, a.height), field, cfg.hyper, CovRequest::diag());
  io::write_pfm(a.out_mean, io::to_pfm(post.mean, a.width, a.height));
  if (!a.out_var.empty()) io::write_pfm(a.out_var, io::to_pfm(post.variances(), a.width, a.height));
  return 0;
}

// select -----------------------------------------------------------------------------

struct SelectArgs {
  std::string fit_json;
  std::string field, out;
  int width = 0, height = 0;
  std::optional<std::size_t> count;
  std::optional<int> stride;
  std::optional<double> max_variance;
};

int run_select(const Globals& g, const SelectArgs& a) {
  Config cfg = g.load();
  apply_fit_sidecar(a.fit_json, cfg, nullptr);
  if (a.count) cfg.selection.count = *a.count;
  if (a.stride) cfg.selection.candidate_stride = *a.stride;
  if (a.max_variance) cfg.selection.max_variance = *a.max_variance;
  cfg.selection.validate();
  const KernelField field = field_or_default(a.field, cfg);
  const auto candidates = grid_coords(a.width, a.height, cfg.selection.candidate_stride);
  const SelectionStop stop{cfg.selection.count, cfg.selection.max_variance};
  const SelectionResult r = greedy_select(field, cfg.hyper, candidates, stop);
  io::CsvWriter w({"u", "v", "step", "variance_before"});
  for (std::size_t i = 0; i < r.order.size(); ++i) {
    w.row({r.coords[i].u, r.coords[i].v, static_cast<double>(i), r.variance_before[i]});
  }
  w.save(a.out);
  return 0;
}

// fit --------------------------------------------------------------------------------

struct FitArgs {
  std::string obs, out_field, out_json;
  int width = 0, height = 0;
};

int run_fit(const Globals& g, const FitArgs& a) {
  Config cfg = g.load();
  if (g.seed) cfg.fit.seed = *g.seed;
  const auto obs = io::read_observations(a.obs);
  if (obs.size() < cfg.fit.inducing_count) cfg.fit.inducing_count = obs.size();
  const FitResult r = fit_field(obs, a.width, a.height, cfg.fit);
  io::write_pfm(a.out_field, io::to_pfm(r.field));
  const json::Json side{{"sigma_f_sq", r.hyper.sigma_f_sq},
                        {"sigma_n_sq", r.hyper.sigma_n_sq},
                        {"m", r.scale.m},
                        {"loss_trace", r.loss_trace}};
  io::write_file(a.out_json, side.dump(2) + "\n");
  return 0;
}

// calibrate --------------------------------------------------------------------------

struct CalibrateArgs {
  std::string fit_json;
  std::string obs, truth, field, out;
  std::vector<int> dims{1, 4, 16};
  std::optional<double> m;
  bool include_noise = false;
};

int run_calibrate(const Globals& g, CalibrateArgs a) {
  Config cfg = g.load();
  apply_fit_sidecar(a.fit_json, cfg, &a.m);
  const auto obs = io::read_observations(a.obs);
  const auto truth = io::read_observations(a.truth);
  if (truth.size() == 0) throw DomainError("calibration needs at least one truth point");
  const KernelField field = field_or_default(a.field, cfg);
  double m = 0.0;
  if (a.m) {
    m = *a.m;
  } else if (obs.size() > 0) {
    m = optimal_scale(obs.y, factorize_observations(obs, field, cfg.hyper)).m;
  }
  std::vector<std::size_t> order(truth.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  io::CsvWriter w({"p_expected", "p_observed", "D"});
  for (int d : a.dims) {
    const auto dist = posterior_block_distances(obs, m, truth.coords, truth.y, order, d, field, cfg.hyper,
                                                a.include_noise);
    const CalibrationCurve c = calibration_curve(dist, d, default_levels());
    for (std::size_t i = 0; i < c.expected.size(); ++i) w.row({c.expected[i], c.observed[i], double(d)});
  }
  w.save(a.out);
  return 0;
}

// ba ---------------------------------------------------------------------------------

struct BaArgs {
  std::string fit_json;
  std::string tracks, poses, intrinsics, out;
  std::vector<std::string> fields;
  bool no_prior = false;
  int dense_width = 0, dense_height = 0;
};

int run_ba(const Globals& g, const BaArgs& a) {
  Config cfg = g.load();
  apply_fit_sidecar(a.fit_json, cfg, nullptr);
  if (a.no_prior) cfg.lm.use_depth_prior = false;
  const Intrinsics k = io::intrinsics_from_json(io::read_json(a.intrinsics));
  auto poses = io::read_poses(a.poses);
  auto tracks = io::read_tracks(a.tracks, cfg.track_sigma);
  if (poses.empty()) throw DomainError("no poses");
  for (const auto& z : tracks) {
    if (z.frame >= static_cast<int>(poses.size())) throw DomainError("track references a missing frame");
  }
  std::vector<FramePrior> priors;
  for (std::size_t c = 0; c < poses.size(); ++c) {
    std::string path;
    if (a.fields.size() == 1) path = a.fields[0];
    else if (!a.fields.empty()) path = a.fields.at(c);
    priors.push_back({field_or_default(path, cfg), cfg.hyper});
  }
  if (!a.fields.empty() && a.fields.size() != 1 && a.fields.size() != poses.size()) {
    throw ConfigError("give one field PFM or one per frame");
  }
  BAProblem p = init_ba_problem(k, std::move(poses), std::move(tracks), std::move(priors));
  const LMState st = lm_optimize(p, cfg.lm);

  const fs::path dir = out_dir(a.out);
  io::poses_csv(p.poses).save((dir / "poses.csv").string());
  io::CsvWriter lw({"landmark_id", "x", "y", "z"});
  for (std::size_t l = 0; l < p.landmarks.size(); ++l) {
    lw.row({double(l), p.landmarks[l].x(), p.landmarks[l].y(), p.landmarks[l].z()});
  }
  lw.save((dir / "landmarks.csv").string());
  io::CsvWriter tw({"iteration", "cost"});
  for (std::size_t i = 0; i < st.cost_trace.size(); ++i) tw.row({double(i), st.cost_trace[i]});
  tw.save((dir / "trace.csv").string());
  io::CsvWriter sw({"frame", "m"});
  for (std::size_t c = 0; c < p.m.size(); ++c) sw.row({double(c), p.m[c]});
  sw.save((dir / "scale.csv").string());

  const int w = a.dense_width > 0 ? a.dense_width : k.width;
  const int h = a.dense_height > 0 ? a.dense_height : k.height;
  for (std::size_t c = 0; c < p.poses.size(); ++c) {
    const DenseDepth d = densify(p, c, p.priors[c], w, h);
    io::write_pfm((dir / ("mean_" + std::to_string(c) + ".pfm")).string(), io::to_pfm(d.mean, w, h));
    io::write_pfm((dir / ("var_" + std::to_string(c) + ".pfm")).string(), io::to_pfm(d.variance, w, h));
  }
  std::cerr << "ba: " << st.iterations << " iterations, stop: " << st.stop_reason << ", final cost "
            << st.cost_trace.back() << "\n";
  return 0;
}

// two-frame --------------------------------------------------------------------------

struct TwoFrameArgs {
  std::string fit_json;
  std::string image0, image1, field, intrinsics, out;
};

int run_two_frame(const Globals& g, const TwoFrameArgs& a) {
  Config cfg = g.load();
  apply_fit_sidecar(a.fit_json, cfg, nullptr);
  const Intrinsics k = io::intrinsics_from_json(io::read_json(a.intrinsics));
  const Image i0 = io::read_gray_image(a.image0), i1 = io::read_gray_image(a.image1);
  const KernelField field = field_or_default(a.field, cfg);
  const TwoFrameResult r = two_frame_solve(i0, i1, field, cfg.hyper, k, cfg.photo);

  const fs::path dir = out_dir(a.out);
  io::poses_csv({Pose(), r.pose}).save((dir / "poses.csv").string());
  io::CsvWriter iw(io::kObservationHeader);
  for (std::size_t i = 0; i < r.inducing.size(); ++i) {
    iw.row({r.inducing[i].u, r.inducing[i].v, r.y(static_cast<Eigen::Index>(i))});
  }
  iw.save((dir / "inducing.csv").string());
  io::CsvWriter tw({"level", "cost"});
  for (const auto& e : r.cost_trace) tw.row({double(e.level), e.cost});
  tw.save((dir / "trace.csv").string());
  io::CsvWriter aw({"frame", "a", "b"});
  aw.row({0, r.affine0.a, r.affine0.b});
  aw.row({1, r.affine1.a, r.affine1.b});
  aw.save((dir / "affine.csv").string());
  io::write_pfm((dir / "mean.pfm").string(),
                io::to_pfm(two_frame_dense_log_depth(r, field, cfg.hyper, k.width, k.height), k.width, k.height));
  if (!r.converged) {
    std::cerr << "two-frame: did not converge (" << r.message << ")\n";
    return kExitNumerical;
  }
  return 0;
}

// synth ------------------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
};

int run_synth(const Globals& g, const SynthArgs& a) {
  const Config cfg = g.load();
  SceneSpec spec = scene_spec_from_json(io::read_json(a.spec));
  if (g.seed) spec.seed = *g.seed;
  const SyntheticScene sc = synth_scene(spec);
  const fs::path dir = out_dir(a.out);
  for (std::size_t f = 0; f < sc.images.size(); ++f) {
    io::write_pfm((dir / ("image_" + std::to_string(f) + ".pfm")).string(), io::to_pfm(sc.images[f]));
    io::write_pfm((dir / ("depth_" + std::to_string(f) + ".pfm")).string(), io::to_pfm(sc.depths[f]));
    io::write_depth_png16((dir / ("depth_" + std::to_string(f) + ".png")).string(), sc.depths[f], cfg.depth_png_scale);
  }
  io::poses_csv(sc.poses).save((dir / "poses.csv").string());
  io::tracks_csv(sc.tracks).save((dir / "tracks.csv").string());
  io::CsvWriter lw({"landmark_id", "x", "y", "z"});
  for (std::size_t l = 0; l < sc.points.size(); ++l) lw.row({double(l), sc.points[l].x(), sc.points[l].y(), sc.points[l].z()});
  lw.save((dir / "landmarks.csv").string());
  io::write_file((dir / "intrinsics.json").string(), io::intrinsics_to_json(sc.camera).dump(2) + "\n");
  return 0;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DegenerateError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const CheiralityError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned depth covariance engine: GP log-depth priors, selection, fitting, BA"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed (fit inducing draw, synth scene)");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(1, 1024));

  int code = 0;

  CompleteArgs ca;
  auto* complete = app.add_subcommand("complete", "Condition on sparse log-depths and write dense PFMs");
  complete->add_option("--obs", ca.obs, "Observations CSV u,v,log_depth")->required();
  complete->add_option("--field", ca.field, "Kernel field PFM (3 channels)");
  complete->add_option("--width", ca.width, "Output width")->required()->check(CLI::PositiveNumber);
  complete->add_option("--height", ca.height, "Output height")->required()->check(CLI::PositiveNumber);
  complete->add_option("--m", ca.m, "Mean log-depth (default: optimal scale, 0 without data)");
  complete->add_option("--out-mean", ca.out_mean, "Posterior mean PFM")->required();
  complete->add_option("--out-var", ca.out_var, "Posterior variance PFM");
  complete->add_option("--fit-json", ca.fit_json, "Sidecar from `fit`: sigma_f_sq, sigma_n_sq, m");
  complete->callback([&] { code = guarded([&] { return run_complete(g, ca); }); });

  SelectArgs sa;
  auto* select = app.add_subcommand("select", "Greedy maximum-variance pixel selection");
  select->add_option("--field", sa.field, "Kernel field PFM (3 channels)");
  select->add_option("--width", sa.width, "Image width")->required()->check(CLI::PositiveNumber);
  select->add_option("--height", sa.height, "Image height")->required()->check(CLI::PositiveNumber);
  select->add_option("--count", sa.count, "Number of points");
  select->add_option("--stride", sa.stride, "Candidate pixel stride");
  select->add_option("--max-variance", sa.max_variance, "Stop once no variance exceeds this");
  select->add_option("--out", sa.out, "Output CSV u,v,step,variance_before")->required();
  select->add_option("--fit-json", sa.fit_json, "Sidecar from `fit`: sigma_f_sq, sigma_n_sq, m");
  select->callback([&] { code = guarded([&] { return run_select(g, sa); }); });

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit a kernel field to one depth example by VFE minimization");
  fit->add_option("--obs", fa.obs, "Observations CSV u,v,log_depth")->required();
  fit->add_option("--width", fa.width, "Field width")->required()->check(CLI::PositiveNumber);
  fit->add_option("--height", fa.height, "Field height")->required()->check(CLI::PositiveNumber);
  fit->add_option("--out-field", fa.out_field, "Fitted field PFM")->required();
  fit->add_option("--out-json", fa.out_json, "Hyperparameter sidecar JSON")->required();
  fit->callback([&] { code = guarded([&] { return run_fit(g, fa); }); });

  CalibrateArgs cba;
  auto* calibrate = app.add_subcommand("calibrate", "Block-Mahalanobis calibration curves");
  calibrate->add_option("--obs", cba.obs, "Conditioning observations CSV")->required();
  calibrate->add_option("--truth", cba.truth, "Held-out truth CSV u,v,log_depth")->required();
  calibrate->add_option("--field", cba.field, "Kernel field PFM (3 channels)");
  calibrate->add_option("--dims", cba.dims, "Block dimensions")->delimiter(',');
  calibrate->add_option("--m", cba.m, "Mean log-depth (default: optimal scale)");
  calibrate->add_flag("--include-noise", cba.include_noise, "Add sigma_n^2 to the block covariances");
  calibrate->add_option("--out", cba.out, "Output CSV p_expected,p_observed,D")->required();
  calibrate->add_option("--fit-json", cba.fit_json, "Sidecar from `fit`: sigma_f_sq, sigma_n_sq, m");
  calibrate->callback([&] { code = guarded([&] { return run_calibrate(g, cba); }); });

  BaArgs ba;
  auto* ba_cmd = app.add_subcommand("ba", "Bundle adjustment with GP depth priors, then densify");
  ba_cmd->add_option("--tracks", ba.tracks, "Tracks CSV frame,landmark_id,u,v")->required();
  ba_cmd->add_option("--poses", ba.poses, "Initial poses CSV tx,ty,tz,qx,qy,qz,qw")->required();
  ba_cmd->add_option("--intrinsics", ba.intrinsics, "Intrinsics JSON")->required();
  ba_cmd->add_option("--fields", ba.fields, "One field PFM, or one per frame")->delimiter(',');
  ba_cmd->add_flag("--no-prior", ba.no_prior, "Disable the depth prior factors");
  ba_cmd->add_option("--dense-width", ba.dense_width, "Dense raster width (default: image width)");
  ba_cmd->add_option("--dense-height", ba.dense_height, "Dense raster height (default: image height)");
  ba_cmd->add_option("--out", ba.out, "Output directory")->required();
  ba_cmd->add_option("--fit-json", ba.fit_json, "Sidecar from `fit`: sigma_f_sq, sigma_n_sq, m");
  ba_cmd->callback([&] { code = guarded([&] { return run_ba(g, ba); }); });

  TwoFrameArgs ta;
  auto* two = app.add_subcommand("two-frame", "Photometric two-frame pose and depth initialization");
  two->add_option("--image0", ta.image0, "Reference image (PNG or PFM)")->required();
  two->add_option("--image1", ta.image1, "Second image (PNG or PFM)")->required();
  two->add_option("--field", ta.field, "Kernel field PFM of the reference image");
  two->add_option("--intrinsics", ta.intrinsics, "Intrinsics JSON")->required();
  two->add_option("--out", ta.out, "Output directory")->required();
  two->add_option("--fit-json", ta.fit_json, "Sidecar from `fit`: sigma_f_sq, sigma_n_sq, m");
  two->callback([&] { code = guarded([&] { return run_two_frame(g, ta); }); });

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Render a synthetic scene with tracks");
  synth->add_option("--spec", sy.spec, "Scene JSON")->required();
  synth->add_option("--out", sy.out, "Output directory")->required();
  synth->callback([&] { code = guarded([&] { return run_synth(g, sy); }); });

  app.parse_complete_callback([&] { set_num_threads(g.threads); });
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  return code;
}
