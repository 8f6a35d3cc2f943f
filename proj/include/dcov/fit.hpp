#pragma once

// Per-image fitting of a kernel field by direct VFE minimization.
//
// The field is parameterized by a coarse control grid that is bilinearly
// upsampled (corner-aligned) to the output resolution. The optimizer works on
// (control raws, log sigma_f^2, log sigma_n^2); m is profiled out in closed
// form at every evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/gp.hpp"
#include "dcov/kernel.hpp"

namespace dcov {

struct ControlGrid {
  int gw = 0;
  int gh = 0;
  /// Interleaved raws, row-major, 3 per control point.
  std::vector<double> raws;

  ControlGrid() = default;
  ControlGrid(int w, int h, const RawKernelParams& fill) : gw(w), gh(h) {
    if (w < 2 || h < 2) throw DomainError("control grid needs at least 2x2 points");
    raws.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < raws.size(); i += 3) {
      raws[i] = fill[0];
      raws[i + 1] = fill[1];
      raws[i + 2] = fill[2];
    }
  }

  std::size_t point_count() const { return static_cast<std::size_t>(gw) * gh; }
  RawKernelParams at(int x, int y) const {
    const std::size_t o = (static_cast<std::size_t>(y) * gw + x) * 3;
    return {raws[o], raws[o + 1], raws[o + 2]};
  }
  void set(int x, int y, const RawKernelParams& r) {
    const std::size_t o = (static_cast<std::size_t>(y) * gw + x) * 3;
    raws[o] = r[0];
    raws[o + 1] = r[1];
    raws[o + 2] = r[2];
  }
};

namespace detail {

// Corner-aligned 1D interpolation: output sample i maps to control coordinate
// i * (g - 1) / (n - 1).
inline void upsample_axis(int i, int n, int g, int& i0, double& t) {
  const double p = n > 1 ? static_cast<double>(i) * (g - 1) / (n - 1) : 0.0;
  i0 = std::min(static_cast<int>(std::floor(p)), g - 2);
  t = p - i0;
}

}  // namespace detail

inline KernelField upsample_field(const ControlGrid& grid, int width, int height) {
  if (grid.gw < 2 || grid.gh < 2) throw DomainError("control grid needs at least 2x2 points");
  if (grid.raws.size() != grid.point_count() * 3) throw DomainError("control grid storage mismatch");
  KernelField field(width, height);
  for (int y = 0; y < height; ++y) {
    int y0;
    double ty;
    detail::upsample_axis(y, height, grid.gh, y0, ty);
    for (int x = 0; x < width; ++x) {
      int x0;
      double tx;
      detail::upsample_axis(x, width, grid.gw, x0, tx);
      const auto a = grid.at(x0, y0), b = grid.at(x0 + 1, y0);
      const auto c = grid.at(x0, y0 + 1), d = grid.at(x0 + 1, y0 + 1);
      RawKernelParams r;
      for (int k = 0; k < 3; ++k) {
        r[k] = (1 - ty) * ((1 - tx) * a[k] + tx * b[k]) + ty * ((1 - tx) * c[k] + tx * d[k]);
      }
      field.set(x, y, r);
    }
  }
  return field;
}

/// Transpose of upsample_field: maps a per-pixel gradient to the control grid.
inline std::vector<double> upsample_adjoint(const std::vector<double>& d_field, int width, int height,
                                            int gw, int gh) {
  std::vector<double> out(static_cast<std::size_t>(gw) * gh * 3, 0.0);
  for (int y = 0; y < height; ++y) {
    int y0;
    double ty;
    detail::upsample_axis(y, height, gh, y0, ty);
    for (int x = 0; x < width; ++x) {
      int x0;
      double tx;
      detail::upsample_axis(x, width, gw, x0, tx);
      const std::size_t src = (static_cast<std::size_t>(y) * width + x) * 3;
      const std::size_t taps[4] = {static_cast<std::size_t>(y0) * gw + x0,
                                   static_cast<std::size_t>(y0) * gw + x0 + 1,
                                   static_cast<std::size_t>(y0 + 1) * gw + x0,
                                   static_cast<std::size_t>(y0 + 1) * gw + x0 + 1};
      const double w[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
      for (int k = 0; k < 4; ++k)
        for (int c = 0; c < 3; ++c) out[taps[k] * 3 + c] += w[k] * d_field[src + c];
    }
  }
  return out;
}

struct FitConfig {
  int grid_w = 16;
  int grid_h = 12;
  int max_iters = 200;
  double initial_step = 0.05;
  double step_grow = 1.2;
  double step_shrink = 0.5;
  /// Stop after this many consecutive accepted steps with relative decrease
  /// below `tolerance`.
  double tolerance = 1e-6;
  int patience = 3;
  double min_step = 1e-10;
  std::size_t inducing_count = 128;
  /// Relative K_uu jitter used while fitting.
  double inducing_jitter = 1e-6;
  double initial_lengthscale = 0.2;
  double initial_sigma_f_sq = 1.0;
  double initial_sigma_n_sq = 1e-2;
  Smoothness nu = Smoothness::FiveHalves;
  std::uint64_t seed = 0;

  void validate() const {
    if (grid_w < 2 || grid_h < 2) throw ConfigError("fit grid must be at least 2x2");
    if (max_iters < 0) throw ConfigError("fit max_iters must be non-negative");
    if (!(initial_step > 0) || !(step_grow >= 1) || !(step_shrink > 0 && step_shrink < 1)) {
      throw ConfigError("invalid fit step adaptation");
    }
    if (!(tolerance > 0) || patience < 1 || !(min_step > 0)) throw ConfigError("invalid fit tolerance");
    if (inducing_count == 0) throw ConfigError("fit inducing count must be positive");
    if (!(inducing_jitter >= 0)) throw ConfigError("fit inducing jitter must be non-negative");
    if (!(initial_lengthscale > 0) || !(initial_sigma_f_sq > 0) || !(initial_sigma_n_sq > 0)) {
      throw ConfigError("fit initial values must be positive");
    }
  }
};

/// Optional starting point; defaults come from FitConfig.
struct FitInit {
  std::optional<ControlGrid> grid;
  std::optional<GPHyperparams> hyper;
};

struct FitResult {
  ControlGrid grid;
  KernelField field;
  GPHyperparams hyper;
  ScaleVariable scale;
  /// Loss after initialization and after each accepted step.
  std::vector<double> loss_trace;
  std::vector<std::size_t> inducing;
  int iterations = 0;
  bool converged = false;
};

/// `count` distinct indices from [0, n), sorted, drawn with a seeded
/// partial Fisher-Yates shuffle.
inline std::vector<std::size_t> random_inducing(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw DomainError("more inducing points than observations");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace detail {

struct FitBounds {
  static constexpr double kLogEllSqLo = -13.8;  // ell ~ 1e-3
  static constexpr double kLogEllSqHi = 4.6;    // ell ~ 10
  static constexpr double kCorrLo = -6.0;
  static constexpr double kCorrHi = 6.0;
  static constexpr double kLogSigmaFLo = -13.8;
  static constexpr double kLogSigmaFHi = 9.2;
  static constexpr double kLogSigmaNLo = -18.4;  // 1e-8
  static constexpr double kLogSigmaNHi = 4.6;
};

// Parameter vector: control raws, then log sigma_f^2, log sigma_n^2.
class FitProblem {
 public:
  FitProblem(const LogDepthObservations& obs, int width, int height, int gw, int gh,
             std::vector<std::size_t> inducing, Smoothness nu, double jitter)
      : obs_(obs), width_(width), height_(height), gw_(gw), gh_(gh),
        inducing_(std::move(inducing)), nu_(nu), jitter_(jitter) {}

  std::size_t dim() const { return static_cast<std::size_t>(gw_) * gh_ * 3 + 2; }

  Eigen::VectorXd pack(const ControlGrid& grid, const GPHyperparams& hyper) const {
    Eigen::VectorXd theta(static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < grid.raws.size(); ++i) theta(static_cast<Eigen::Index>(i)) = grid.raws[i];
    theta(theta.size() - 2) = std::log(hyper.sigma_f_sq);
    theta(theta.size() - 1) = std::log(hyper.sigma_n_sq);
    return theta;
  }
  ControlGrid grid(const Eigen::VectorXd& theta) const {
    ControlGrid g;
    g.gw = gw_;
    g.gh = gh_;
    g.raws.assign(theta.data(), theta.data() + theta.size() - 2);
    return g;
  }
  GPHyperparams hyper(const Eigen::VectorXd& theta) const {
    return {std::exp(theta(theta.size() - 2)), std::exp(theta(theta.size() - 1)), nu_};
  }

  void project(Eigen::VectorXd& theta) const {
    const Eigen::Index n = theta.size() - 2;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i % 3 == 2) theta(i) = std::clamp(theta(i), FitBounds::kCorrLo, FitBounds::kCorrHi);
      else theta(i) = std::clamp(theta(i), FitBounds::kLogEllSqLo, FitBounds::kLogEllSqHi);
    }
    theta(n) = std::clamp(theta(n), FitBounds::kLogSigmaFLo, FitBounds::kLogSigmaFHi);
    theta(n + 1) = std::clamp(theta(n + 1), FitBounds::kLogSigmaNLo, FitBounds::kLogSigmaNHi);
  }

  /// Loss and (optionally) gradient in the packed parameterization.
  VfeResult evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
    const KernelField field = upsample_field(grid(theta), width_, height_);
    const GPHyperparams h = hyper(theta);
    VfeOptions opt;
    opt.inducing_jitter = jitter_;
    opt.compute_gradient = grad != nullptr;
    opt.profile_mean = true;
    VfeResult r = vfe(obs_, inducing_, 0.0, field, h, opt);
    if (grad) {
      const auto d_grid = upsample_adjoint(r.d_field, width_, height_, gw_, gh_);
      grad->resize(static_cast<Eigen::Index>(dim()));
      for (std::size_t i = 0; i < d_grid.size(); ++i) (*grad)(static_cast<Eigen::Index>(i)) = d_grid[i];
      (*grad)(grad->size() - 2) = r.d_sigma_f_sq * h.sigma_f_sq;
      (*grad)(grad->size() - 1) = r.d_sigma_n_sq * h.sigma_n_sq;
    }
    return r;
  }

 private:
  const LogDepthObservations& obs_;
  int width_, height_, gw_, gh_;
  std::vector<std::size_t> inducing_;
  Smoothness nu_;
  double jitter_;
};

}  // namespace detail

/// Fits a field of size width x height to log-depth observations.
inline FitResult fit_field(const LogDepthObservations& obs, int width, int height,
                           const FitConfig& config, const FitInit& init = {}) {
  config.validate();
  obs.validate();
  if (width < 1 || height < 1) throw DomainError("fit field dimensions must be positive");
  if (obs.size() < config.inducing_count) throw DomainError("fewer observations than inducing points");

  FitResult out;
  out.inducing = random_inducing(obs.size(), config.inducing_count, config.seed);
  const detail::FitProblem problem(obs, width, height, config.grid_w, config.grid_h, out.inducing,
                                   config.nu, config.inducing_jitter);

  const double c = 2.0 * std::log(config.initial_lengthscale);
  const ControlGrid grid0 = init.grid ? *init.grid : ControlGrid(config.grid_w, config.grid_h, {c, c, 0.0});
  if (grid0.gw != config.grid_w || grid0.gh != config.grid_h) throw ConfigError("initial grid size mismatch");
  GPHyperparams hyper0 = init.hyper ? *init.hyper
                                    : GPHyperparams{config.initial_sigma_f_sq, config.initial_sigma_n_sq, config.nu};
  hyper0.nu = config.nu;
  hyper0.validate();

  Eigen::VectorXd theta = problem.pack(grid0, hyper0);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (!std::isfinite(theta(i))) throw ConfigError("non-finite initial fit parameters");
  }
  Eigen::VectorXd grad;
  VfeResult cur;
  try {
    cur = problem.evaluate(theta, &grad);
  } catch (const NumericalError& e) {
    throw ConfigError(std::string("fit initialization failed: ") + e.what());
  }
  if (!std::isfinite(cur.loss) || !grad.allFinite()) throw ConfigError("non-finite loss at fit initialization");
  out.loss_trace.push_back(cur.loss);

  Eigen::VectorXd rms = grad.cwiseAbs2();
  double step = config.initial_step;
  int quiet = 0;
  for (int it = 0; it < config.max_iters; ++it) {
    out.iterations = it + 1;
    const Eigen::VectorXd precond = (rms.array().sqrt() + 1e-12).inverse();
    Eigen::VectorXd trial = theta - step * grad.cwiseProduct(precond);
    problem.project(trial);

    VfeResult next;
    Eigen::VectorXd next_grad;
    bool ok = true;
    try {
      next = problem.evaluate(trial, &next_grad);
      ok = std::isfinite(next.loss) && next_grad.allFinite();
    } catch (const NumericalError&) {
      ok = false;
    }
    if (ok && next.loss < cur.loss) {
      const double rel = (cur.loss - next.loss) / std::max(std::abs(cur.loss), 1.0);
      theta = trial;
      cur = next;
      grad = next_grad;
      rms = 0.9 * rms + 0.1 * grad.cwiseAbs2();
      out.loss_trace.push_back(cur.loss);
      step *= config.step_grow;
      quiet = rel < config.tolerance ? quiet + 1 : 0;
      if (quiet >= config.patience) {
        out.converged = true;
        break;
      }
    } else {
      step *= config.step_shrink;
      if (step < config.min_step) {
        out.converged = true;
        break;
      }
    }
  }

  if (out.loss_trace.size() == 1) {
    out.grid = grid0;
    out.hyper = hyper0;
  } else {
    out.grid = problem.grid(theta);
    out.hyper = problem.hyper(theta);
  }
  out.field = upsample_field(out.grid, width, height);
  out.scale.m = cur.m;
  return out;
}

}  // namespace dcov
