#pragma once

// JSON run configuration. Every section and key is optional; unknown keys are
// rejected and values are validated against the module invariants on load.
//
// {
//   "hyperparams": {"sigma_f_sq", "sigma_n_sq", "matern_nu"},
//   "fit":         {"grid_w", "grid_h", "max_iters", "initial_step", "step_grow", "step_shrink",
//                   "tolerance", "patience", "min_step", "inducing_count", "inducing_jitter",
//                   "initial_lengthscale", "initial_sigma_f_sq", "initial_sigma_n_sq"},
//   "lm":          {"use_depth_prior", "huber_delta", "gauge_sigma", "max_iters", "initial_lambda",
//                   "lambda_shrink", "lambda_grow", "rel_tol", "step_tol", "max_factor_retries",
//                   "polish_iters", "track_sigma"},
//   "photo":       {"pyramid_levels", "pixel_stride", "gradient_quantile", "inducing",
//                   "candidate_stride", "sigma_r", "huber_delta", "prior_weight", "min_mean_gradient",
//                   "max_iters", "initial_lambda", "lambda_shrink", "lambda_grow", "lambda_max",
//                   "rel_tol", "step_tol", "max_factor_retries"},
//   "selection":   {"count", "max_variance", "candidate_stride"},
//   "io":          {"depth_png_scale"}
// }

#include <cstdint>
#include <optional>
#include <string>

#include "dcov/ba.hpp"
#include "dcov/fit.hpp"
#include "dcov/io.hpp"
#include "dcov/json_util.hpp"
#include "dcov/kernel.hpp"
#include "dcov/photo.hpp"

namespace dcov {

struct SelectionConfig {
  std::size_t count = 64;
  std::optional<double> max_variance;
  int candidate_stride = 1;

  void validate() const {
    if (candidate_stride < 1) throw ConfigError("selection candidate_stride must be positive");
    if (max_variance && !(*max_variance >= 0)) throw ConfigError("selection max_variance must be non-negative");
  }
};

struct Config {
  GPHyperparams hyper;
  FitConfig fit;
  BAConfig lm;
  /// Pixel standard deviation assigned to ingested tracks.
  double track_sigma = 1.0;
  PhotoConfig photo;
  SelectionConfig selection;
  double depth_png_scale = io::kDefaultDepthPngScale;

  void validate() const {
    hyper.validate();
    fit.validate();
    lm.validate();
    photo.validate();
    selection.validate();
    if (!(track_sigma > 0)) throw ConfigError("lm track_sigma must be positive");
    if (!(depth_png_scale > 0)) throw ConfigError("io depth_png_scale must be positive");
  }
};

inline Config config_from_json(const json::Json& j) {
  using json::read;
  Config c;
  json::reject_unknown(j, "config", {"hyperparams", "fit", "lm", "photo", "selection", "io"});
  try {
    if (j.contains("hyperparams")) {
      const auto& h = j["hyperparams"];
      json::reject_unknown(h, "hyperparams", {"sigma_f_sq", "sigma_n_sq", "matern_nu"});
      read(h, "sigma_f_sq", c.hyper.sigma_f_sq, "hyperparams");
      read(h, "sigma_n_sq", c.hyper.sigma_n_sq, "hyperparams");
      double nu = nu_value(c.hyper.nu);
      read(h, "matern_nu", nu, "hyperparams");
      c.hyper.nu = smoothness_from_nu(nu);
      c.fit.nu = c.hyper.nu;
      c.fit.initial_sigma_f_sq = c.hyper.sigma_f_sq;
      c.fit.initial_sigma_n_sq = c.hyper.sigma_n_sq;
    }
    if (j.contains("fit")) {
      const auto& f = j["fit"];
      json::reject_unknown(f, "fit",
                           {"grid_w", "grid_h", "max_iters", "initial_step", "step_grow", "step_shrink", "tolerance",
                            "patience", "min_step", "inducing_count", "inducing_jitter", "initial_lengthscale",
                            "initial_sigma_f_sq", "initial_sigma_n_sq"});
      read(f, "grid_w", c.fit.grid_w, "fit");
      read(f, "grid_h", c.fit.grid_h, "fit");
      read(f, "max_iters", c.fit.max_iters, "fit");
      read(f, "initial_step", c.fit.initial_step, "fit");
      read(f, "step_grow", c.fit.step_grow, "fit");
      read(f, "step_shrink", c.fit.step_shrink, "fit");
      read(f, "tolerance", c.fit.tolerance, "fit");
      read(f, "patience", c.fit.patience, "fit");
      read(f, "min_step", c.fit.min_step, "fit");
      read(f, "inducing_count", c.fit.inducing_count, "fit");
      read(f, "inducing_jitter", c.fit.inducing_jitter, "fit");
      read(f, "initial_lengthscale", c.fit.initial_lengthscale, "fit");
      read(f, "initial_sigma_f_sq", c.fit.initial_sigma_f_sq, "fit");
      read(f, "initial_sigma_n_sq", c.fit.initial_sigma_n_sq, "fit");
    }
    if (j.contains("lm")) {
      const auto& l = j["lm"];
      json::reject_unknown(l, "lm",
                           {"use_depth_prior", "huber_delta", "gauge_sigma", "max_iters", "initial_lambda",
                            "lambda_shrink", "lambda_grow", "rel_tol", "step_tol", "max_factor_retries",
                            "polish_iters", "track_sigma"});
      read(l, "use_depth_prior", c.lm.use_depth_prior, "lm");
      read(l, "huber_delta", c.lm.huber_delta, "lm");
      read(l, "gauge_sigma", c.lm.gauge_sigma, "lm");
      read(l, "max_iters", c.lm.max_iters, "lm");
      read(l, "initial_lambda", c.lm.initial_lambda, "lm");
      read(l, "lambda_shrink", c.lm.lambda_shrink, "lm");
      read(l, "lambda_grow", c.lm.lambda_grow, "lm");
      read(l, "rel_tol", c.lm.rel_tol, "lm");
      read(l, "step_tol", c.lm.step_tol, "lm");
      read(l, "max_factor_retries", c.lm.max_factor_retries, "lm");
      read(l, "polish_iters", c.lm.polish_iters, "lm");
      read(l, "track_sigma", c.track_sigma, "lm");
    }
    if (j.contains("photo")) {
      const auto& p = j["photo"];
      json::reject_unknown(p, "photo",
                           {"pyramid_levels", "pixel_stride", "gradient_quantile", "inducing", "candidate_stride",
                            "sigma_r", "huber_delta", "prior_weight", "min_mean_gradient", "max_iters",
                            "initial_lambda", "lambda_shrink", "lambda_grow", "lambda_max", "rel_tol", "step_tol",
                            "max_factor_retries"});
      read(p, "pyramid_levels", c.photo.pyramid_levels, "photo");
      read(p, "pixel_stride", c.photo.pixel_stride, "photo");
      read(p, "gradient_quantile", c.photo.gradient_quantile, "photo");
      read(p, "inducing", c.photo.inducing, "photo");
      read(p, "candidate_stride", c.photo.candidate_stride, "photo");
      read(p, "sigma_r", c.photo.sigma_r, "photo");
      read(p, "huber_delta", c.photo.huber_delta, "photo");
      read(p, "prior_weight", c.photo.prior_weight, "photo");
      read(p, "min_mean_gradient", c.photo.min_mean_gradient, "photo");
      read(p, "max_iters", c.photo.max_iters, "photo");
      read(p, "initial_lambda", c.photo.initial_lambda, "photo");
      read(p, "lambda_shrink", c.photo.lambda_shrink, "photo");
      read(p, "lambda_grow", c.photo.lambda_grow, "photo");
      read(p, "lambda_max", c.photo.lambda_max, "photo");
      read(p, "rel_tol", c.photo.rel_tol, "photo");
      read(p, "step_tol", c.photo.step_tol, "photo");
      read(p, "max_factor_retries", c.photo.max_factor_retries, "photo");
    }
    if (j.contains("selection")) {
      const auto& s = j["selection"];
      json::reject_unknown(s, "selection", {"count", "max_variance", "candidate_stride"});
      read(s, "count", c.selection.count, "selection");
      if (s.contains("max_variance")) {
        double t = 0.0;
        read(s, "max_variance", t, "selection");
        c.selection.max_variance = t;
      }
      read(s, "candidate_stride", c.selection.candidate_stride, "selection");
    }
    if (j.contains("io")) {
      const auto& o = j["io"];
      json::reject_unknown(o, "io", {"depth_png_scale"});
      read(o, "depth_png_scale", c.depth_png_scale, "io");
    }
    c.validate();
  } catch (const InvalidParameter& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline Config load_config(const std::string& path) { return config_from_json(io::read_json(path)); }

}  // namespace dcov
