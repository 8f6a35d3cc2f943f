#pragma once

// Photometric factors over GP-conditioned depth.
//
// Frame i carries inducing log-depths y at fixed normalized coordinates. The
// log-depth at a pixel is the GP conditional mean f = m + C (y - m), with
// C = K_fu (K_uu + sigma_n^2 I)^-1. A pixel x of frame i is warped into frame j
// and compared with affine brightness correction:
//   r = (I_i(x) + b_i - e^{a_j - a_i} I_j(x') - b_j) / sigma_r

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/geometry.hpp"
#include "dcov/gp.hpp"
#include "dcov/image.hpp"
#include "dcov/kernel.hpp"
#include "dcov/linalg.hpp"
#include "dcov/parallel.hpp"
#include "dcov/robust.hpp"
#include "dcov/select.hpp"

namespace dcov {

struct AffineBrightness {
  double a = 0.0;  // log gain
  double b = 0.0;  // bias
};

/// Linear map from inducing log-depths to the dense log-depth at a pixel set.
struct DepthInterpolant {
  std::vector<Eigen::Vector2d> pixels;
  std::vector<NormalizedCoord> inducing;
  /// n x k predictive operator C.
  Eigen::MatrixXd op;
  /// 1 - C 1, the derivative of f with respect to m.
  Eigen::VectorXd d_m;

  std::size_t size() const { return pixels.size(); }

  static DepthInterpolant build(const std::vector<Eigen::Vector2d>& pixels, int width, int height,
                                const std::vector<NormalizedCoord>& inducing, const KernelField& field,
                                const GPHyperparams& hyper) {
    if (inducing.empty()) throw DomainError("depth interpolant needs inducing points");
    DepthInterpolant out;
    out.pixels = pixels;
    out.inducing = inducing;
    std::vector<NormalizedCoord> coords;
    coords.reserve(pixels.size());
    for (const auto& p : pixels) coords.push_back(pixel_to_coord(p.x(), p.y(), width, height));
    out.op = Conditioner(inducing, field, hyper).predictive_operator(coords);
    out.d_m = Eigen::VectorXd::Ones(out.op.rows()) - out.op.rowwise().sum();
    return out;
  }

  Eigen::VectorXd log_depth(const Eigen::VectorXd& y, double m) const {
    if (y.size() != op.cols()) throw DomainError("inducing value count mismatch");
    return Eigen::VectorXd::Constant(op.rows(), m) + op * (y.array() - m).matrix();
  }
};

struct PhotometricResult {
  /// Whitened residuals; exactly zero where masked.
  Eigen::VectorXd residual;
  std::vector<std::uint8_t> valid;
  std::size_t valid_count = 0;
  // Jacobian rows are zero where masked. Pose columns follow the left
  // perturbation exp(delta) T; affine columns are (a_i, b_i, a_j, b_j).
  Eigen::MatrixXd d_pose_i;
  Eigen::MatrixXd d_pose_j;
  Eigen::MatrixXd d_y;
  Eigen::VectorXd d_m;
  Eigen::MatrixXd d_affine;
};

inline PhotometricResult photometric_residual(const Image& ii, const Image& ij, const Intrinsics& k,
                                              const DepthInterpolant& depth, const Eigen::VectorXd& y, double m,
                                              const Pose& ti, const Pose& tj, const AffineBrightness& ai,
                                              const AffineBrightness& aj, double sigma_r, bool jacobians = true) {
  if (!(sigma_r > 0)) throw DomainError("photometric sigma must be positive");
  if (ii.width != k.width || ii.height != k.height || ij.width != k.width || ij.height != k.height) {
    throw DomainError("image dimensions do not match the intrinsics");
  }
  const auto n = static_cast<Eigen::Index>(depth.size());
  const Eigen::Index nk = depth.op.cols();
  const Eigen::VectorXd f = depth.log_depth(y, m);
  const Eigen::Matrix3d r_rel = relative_pose(ti, tj).rotation();
  const double gain = std::exp(aj.a - ai.a);

  PhotometricResult out;
  out.residual = Eigen::VectorXd::Zero(n);
  out.valid.assign(depth.size(), 0);
  if (jacobians) {
    out.d_pose_i = Eigen::MatrixXd::Zero(n, 6);
    out.d_pose_j = Eigen::MatrixXd::Zero(n, 6);
    out.d_y = Eigen::MatrixXd::Zero(n, nk);
    out.d_m = Eigen::VectorXd::Zero(n);
    out.d_affine = Eigen::MatrixXd::Zero(n, 4);
  }

  parallel_for(depth.size(), [&](std::size_t p) {
    const auto row = static_cast<Eigen::Index>(p);
    const Eigen::Vector2d& px = depth.pixels[p];
    if (!in_bounds(ii, px.x(), px.y())) throw DomainError("photometric pixel outside the reference image");
    const WarpResult w = warp_checked(px, ti, tj, f(row), k);
    if (w.status != WarpStatus::Ok || !in_bounds(ij, w.pixel.x(), w.pixel.y())) return;
    const double vi = sample_bilinear(ii, px.x(), px.y()).value;
    const ImageSample sj = sample_bilinear(ij, w.pixel.x(), w.pixel.y());
    out.valid[p] = 1;
    out.residual(row) = (vi + ai.b - gain * sj.value - aj.b) / sigma_r;
    if (!jacobians) return;

    // d r / d P_j
    const Eigen::RowVector3d dr_dpj =
        -(gain / sigma_r) * sj.gradient.transpose() * projection_jacobian(w.point_j, k);
    out.d_pose_j.row(row) = dr_dpj * point_jacobian_left(w.point_j);
    Mat36 dpj_dpi;
    dpj_dpi.leftCols<3>() = r_rel * skew(w.point_i);
    dpj_dpi.rightCols<3>() = -r_rel;
    out.d_pose_i.row(row) = dr_dpj * dpj_dpi;
    const double dr_df = dr_dpj.dot(r_rel * w.point_i);
    out.d_y.row(row) = dr_df * depth.op.row(row);
    out.d_m(row) = dr_df * depth.d_m(row);
    const double gi = gain * sj.value / sigma_r;
    out.d_affine.row(row) << gi, 1.0 / sigma_r, -gi, -1.0 / sigma_r;
  });

  for (auto v : out.valid) out.valid_count += v;
  if (out.valid_count == 0) throw DegenerateError("no valid photometric residuals");
  return out;
}

/// Convenience form that builds the depth interpolant from the kernel field.
inline PhotometricResult photometric_residual(const Image& ii, const Image& ij, const Intrinsics& k,
                                              const std::vector<Eigen::Vector2d>& pixels,
                                              const std::vector<NormalizedCoord>& inducing,
                                              const Eigen::VectorXd& y, double m, const KernelField& field,
                                              const GPHyperparams& hyper, const Pose& ti, const Pose& tj,
                                              const AffineBrightness& ai, const AffineBrightness& aj,
                                              double sigma_r) {
  const auto depth = DepthInterpolant::build(pixels, k.width, k.height, inducing, field, hyper);
  return photometric_residual(ii, ij, k, depth, y, m, ti, tj, ai, aj, sigma_r);
}

/// Robust photometric cost; masked pixels contribute nothing.
inline double photometric_cost(const PhotometricResult& r, double huber_delta) {
  double c = 0.0;
  for (Eigen::Index i = 0; i < r.residual.size(); ++i) {
    if (r.valid[static_cast<std::size_t>(i)]) c += huber_cost(std::abs(r.residual(i)), huber_delta);
  }
  return c;
}

// Keyframe depth initialization --------------------------------------------------------

/// Minimizer over y of (y - m)^T K^-1 (y - m) + (e - f)^T S^-1 (e - f), where
/// f = m + C (y - m) are the predicted log-depths at the reprojected points,
/// e their observed log-depths and S = diag(sigma_diag). Closed form:
///   y = m + K C^T (C K C^T + S)^-1 (e - m).
inline Eigen::VectorXd init_keyframe_depths(const Eigen::MatrixXd& k_prior, double m, const Eigen::VectorXd& log_d,
                                            const Eigen::MatrixXd& op, const Eigen::VectorXd& sigma_diag) {
  const Eigen::Index nk = k_prior.rows();
  if (k_prior.cols() != nk || nk == 0) throw DomainError("prior covariance must be square and non-empty");
  if (!std::isfinite(m)) throw InvalidParameter("non-finite scale variable");
  if (log_d.size() == 0) return Eigen::VectorXd::Constant(nk, m);
  if (op.rows() != log_d.size() || op.cols() != nk || sigma_diag.size() != log_d.size()) {
    throw DomainError("keyframe initialization dimension mismatch");
  }
  if (!(sigma_diag.array() > 0).all()) throw DomainError("predictive variances must be positive");
  if (!log_d.allFinite()) throw DomainError("non-finite reprojected log-depth");
  const Eigen::MatrixXd kct = k_prior * op.transpose();
  Eigen::MatrixXd s = op * kct;
  s = 0.5 * (s + s.transpose()).eval();
  s.diagonal() += sigma_diag;
  const Cholesky chol = cholesky_with_jitter(s);
  return Eigen::VectorXd::Constant(nk, m) + kct * chol.solve(Eigen::VectorXd(log_d.array() - m));
}

/// Builds the prior, predictive operator and predictive variances from the
/// kernel field. The prior on inducing values is K_uu + sigma_n^2 I; predictive
/// variances include sigma_n^2 so they stay positive.
inline Eigen::VectorXd init_keyframe_depths(const std::vector<NormalizedCoord>& inducing, double m,
                                            const std::vector<NormalizedCoord>& depth_coords,
                                            const Eigen::VectorXd& log_d, const KernelField& field,
                                            const GPHyperparams& hyper) {
  if (static_cast<Eigen::Index>(depth_coords.size()) != log_d.size()) {
    throw DomainError("reprojected depth count mismatch");
  }
  Eigen::MatrixXd k = build_cov_matrix(inducing, field, hyper);
  k.diagonal().array() += hyper.sigma_n_sq;
  if (depth_coords.empty()) return Eigen::VectorXd::Constant(k.rows(), m);
  const Conditioner cond(inducing, field, hyper);
  const Posterior post =
      cond.posterior(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(inducing.size()), m), m, depth_coords,
                     CovRequest::diag());
  const Eigen::VectorXd var = post.variances().array() + hyper.sigma_n_sq;
  return init_keyframe_depths(k, m, log_d, cond.predictive_operator(depth_coords), var);
}

// Two-frame initialization ---------------------------------------------------------------

struct PhotoConfig {
  int pyramid_levels = 3;
  int pixel_stride = 2;
  /// Pixels whose gradient magnitude exceeds this quantile of the strided grid are used.
  double gradient_quantile = 0.5;
  int inducing = 32;
  int candidate_stride = 4;
  double sigma_r = 0.02;
  double huber_delta = 1.345;
  double prior_weight = 1.0;
  double min_mean_gradient = 1e-4;
  int max_iters = 50;
  double initial_lambda = 1e-3;
  double lambda_shrink = 0.5;
  double lambda_grow = 4.0;
  double lambda_max = 1e10;
  double rel_tol = 1e-6;
  double step_tol = 1e-8;
  int max_factor_retries = 10;

  void validate() const {
    if (pyramid_levels < 1 || pixel_stride < 1 || candidate_stride < 1 || inducing < 1) {
      throw ConfigError("photo pyramid, stride and inducing counts must be positive");
    }
    if (!(gradient_quantile >= 0 && gradient_quantile < 1)) throw ConfigError("photo gradient_quantile must lie in [0,1)");
    if (!(sigma_r > 0) || !(huber_delta > 0) || !(prior_weight >= 0) || !(min_mean_gradient >= 0)) {
      throw ConfigError("photo noise, huber and weights must be positive");
    }
    if (max_iters < 0 || max_factor_retries < 0) throw ConfigError("photo iteration limits must be non-negative");
    if (!(initial_lambda > 0) || !(lambda_shrink > 0 && lambda_shrink < 1) || !(lambda_grow > 1) ||
        !(lambda_max > initial_lambda)) {
      throw ConfigError("invalid photo damping schedule");
    }
    if (!(rel_tol >= 0) || !(step_tol >= 0)) throw ConfigError("photo tolerances must be non-negative");
  }
};

struct TwoFrameTraceEntry {
  int level = 0;
  double cost = 0.0;
};

struct TwoFrameResult {
  /// Pose of frame 1; frame 0 is the identity.
  Pose pose;
  std::vector<NormalizedCoord> inducing;
  Eigen::VectorXd y;
  double m = 0.0;
  AffineBrightness affine0;
  AffineBrightness affine1;
  /// Accepted-step costs, level by level from coarse to fine.
  std::vector<TwoFrameTraceEntry> cost_trace;
  int iterations = 0;
  bool converged = false;
  std::string message;
};

/// Intrinsics of a 2x2 box-downsampled image (pixel centers at integers).
inline Intrinsics downsample_intrinsics(const Intrinsics& k, int width, int height) {
  return {k.fx / 2, k.fy / 2, (k.cx + 0.5) / 2 - 0.5, (k.cy + 0.5) / 2 - 0.5, width, height};
}

/// Strided pixels with gradient magnitude above the configured quantile.
inline std::vector<Eigen::Vector2d> select_photometric_pixels(const Image& img, int stride, double quantile) {
  const Image grad = gradient_magnitude(img);
  std::vector<double> values;
  for (int y = 0; y < img.height; y += stride)
    for (int x = 0; x < img.width; x += stride) values.push_back(grad.at(x, y));
  if (values.empty()) return {};
  std::vector<double> sorted = values;
  const auto q = static_cast<std::size_t>(quantile * static_cast<double>(sorted.size() - 1));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q), sorted.end());
  const double threshold = sorted[q];
  std::vector<Eigen::Vector2d> out;
  for (int y = 0; y < img.height; y += stride)
    for (int x = 0; x < img.width; x += stride) {
      if (grad.at(x, y) > threshold) out.emplace_back(x, y);
    }
  return out;
}

namespace detail {

struct TwoFrameLevel {
  const Image* i0;
  const Image* i1;
  Intrinsics k;
  DepthInterpolant depth;
};

struct TwoFrameVars {
  Pose pose;
  Eigen::VectorXd y;
  AffineBrightness affine1;
};

class TwoFrameEvaluator {
 public:
  TwoFrameEvaluator(const TwoFrameLevel& level, const Cholesky& prior_chol, const PhotoConfig& cfg)
      : level_(level), prior_(prior_chol), cfg_(cfg) {
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(prior_chol.size(), prior_chol.size());
    prior_inv_ = prior_chol.solve(id);
  }

  Eigen::Index dim() const { return 8 + level_.depth.op.cols(); }

  double cost(const TwoFrameVars& v) const {
    PhotometricResult r;
    try {
      r = eval(v, false);
    } catch (const DegenerateError&) {
      return std::numeric_limits<double>::infinity();
    }
    return photometric_cost(r, cfg_.huber_delta) + prior_cost(v);
  }

  double linearize(const TwoFrameVars& v, Eigen::MatrixXd& h, Eigen::VectorXd& g) const {
    const PhotometricResult r = eval(v, true);
    const Eigen::Index nk = level_.depth.op.cols();
    Eigen::MatrixXd j(r.residual.size(), dim());
    j << r.d_pose_j, r.d_y, r.d_affine.rightCols<2>();
    Eigen::VectorXd w(r.residual.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w(i) = r.valid[static_cast<std::size_t>(i)] ? huber_weight(std::abs(r.residual(i)), cfg_.huber_delta) : 0.0;
    }
    h = j.transpose() * w.asDiagonal() * j;
    g = j.transpose() * (w.array() * r.residual.array()).matrix();
    if (cfg_.prior_weight > 0) {
      h.block(6, 6, nk, nk) += cfg_.prior_weight * prior_inv_;
      g.segment(6, nk) += cfg_.prior_weight * (prior_inv_ * v.y);
    }
    return photometric_cost(r, cfg_.huber_delta) + prior_cost(v);
  }

  TwoFrameVars apply(const TwoFrameVars& v, const Eigen::VectorXd& delta) const {
    const Eigen::Index nk = level_.depth.op.cols();
    TwoFrameVars out = v;
    out.pose = perturb(v.pose, delta.head<6>());
    out.y += delta.segment(6, nk);
    out.affine1.a += delta(6 + nk);
    out.affine1.b += delta(7 + nk);
    return out;
  }

 private:
  PhotometricResult eval(const TwoFrameVars& v, bool jacobians) const {
    return photometric_residual(*level_.i0, *level_.i1, level_.k, level_.depth, v.y, 0.0, Pose(), v.pose,
                                AffineBrightness{}, v.affine1, cfg_.sigma_r, jacobians);
  }
  double prior_cost(const TwoFrameVars& v) const {
    if (cfg_.prior_weight == 0) return 0.0;
    return 0.5 * cfg_.prior_weight * prior_.forward(v.y).squaredNorm();
  }

  const TwoFrameLevel& level_;
  const Cholesky& prior_;
  Eigen::MatrixXd prior_inv_;
  PhotoConfig cfg_;
};

}  // namespace detail

/// Relative pose, inducing log-depths and affine brightness of frame 1 from two
/// images by coarse-to-fine LM. Frame 0 is the identity with m_0 = 0 and zero
/// affine parameters. Non-convergence is reported, not thrown.
inline TwoFrameResult two_frame_solve(const Image& i0, const Image& i1, const KernelField& field0,
                                      const GPHyperparams& hyper, const Intrinsics& k, const PhotoConfig& config) {
  config.validate();
  hyper.validate();
  k.validate();
  i0.validate();
  i1.validate();
  if (i0.width != i1.width || i0.height != i1.height) throw DomainError("two-frame images differ in size");
  if (i0.width != k.width || i0.height != k.height) throw DomainError("image size does not match intrinsics");
  const Image grad0 = gradient_magnitude(i0);
  double mean_grad = 0.0;
  for (double v : grad0.data) mean_grad += v;
  mean_grad /= static_cast<double>(grad0.size());
  if (!(mean_grad > config.min_mean_gradient)) throw DegenerateError("reference image has too little texture");

  // Inducing points: greedy variance selection over a strided pixel grid.
  TwoFrameResult out;
  const auto candidates = grid_coords(k.width, k.height, config.candidate_stride);
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(config.inducing), candidates.size());
  out.inducing = greedy_select(field0, hyper, candidates, SelectionStop::after(count)).coords;
  Eigen::MatrixXd kuu = build_cov_matrix(out.inducing, field0, hyper);
  kuu.diagonal().array() += hyper.sigma_n_sq;
  const Cholesky prior_chol = cholesky_with_jitter(kuu);

  std::vector<Image> pyr0{i0}, pyr1{i1};
  std::vector<Intrinsics> ks{k};
  for (int l = 1; l < config.pyramid_levels; ++l) {
    if (pyr0.back().width < 4 || pyr0.back().height < 4) break;
    pyr0.push_back(downsample(pyr0.back()));
    pyr1.push_back(downsample(pyr1.back()));
    ks.push_back(downsample_intrinsics(ks.back(), pyr0.back().width, pyr0.back().height));
  }

  detail::TwoFrameVars vars{Pose(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out.inducing.size())), {}};
  out.converged = false;
  for (int level = static_cast<int>(pyr0.size()) - 1; level >= 0; --level) {
    const auto l = static_cast<std::size_t>(level);
    const auto pixels = select_photometric_pixels(pyr0[l], config.pixel_stride, config.gradient_quantile);
    if (pixels.empty()) continue;
    const detail::TwoFrameLevel lvl{&pyr0[l], &pyr1[l], ks[l],
                                    DepthInterpolant::build(pixels, ks[l].width, ks[l].height, out.inducing, field0,
                                                            hyper)};
    const detail::TwoFrameEvaluator ev(lvl, prior_chol, config);

    Eigen::MatrixXd h;
    Eigen::VectorXd g;
    double cost = 0.0;
    try {
      cost = ev.linearize(vars, h, g);
    } catch (const DegenerateError&) {
      out.message = "no valid residuals at pyramid level " + std::to_string(level);
      continue;
    }
    out.cost_trace.push_back({level, cost});
    double lambda = config.initial_lambda;
    bool level_converged = false;
    bool relinearize = false;
    std::string reason = "max iterations";
    for (int it = 0; it < config.max_iters; ++it) {
      ++out.iterations;
      if (relinearize) {
        cost = ev.linearize(vars, h, g);
        relinearize = false;
      }
      if (lambda > config.lambda_max) {
        reason = "damping exceeded the divergence cap";
        break;
      }
      Eigen::VectorXd delta;
      bool solved = false;
      for (int attempt = 0; attempt <= config.max_factor_retries && !solved; ++attempt) {
        Eigen::MatrixXd damped = h;
        damped.diagonal().array() += lambda;
        const Eigen::LLT<Eigen::MatrixXd> llt(damped);
        if (llt.info() == Eigen::Success) {
          delta = llt.solve(-g);
          solved = delta.allFinite();
        }
        if (!solved) lambda *= config.lambda_grow;
      }
      if (!solved) {
        reason = "normal equations could not be factorized";
        break;
      }
      if (delta.norm() < config.step_tol) {
        level_converged = true;
        reason = "step";
        break;
      }
      const detail::TwoFrameVars trial = ev.apply(vars, delta);
      const double trial_cost = ev.cost(trial);
      if (trial_cost < cost) {
        const double rel = (cost - trial_cost) / std::max(cost, std::numeric_limits<double>::min());
        vars = trial;
        cost = trial_cost;
        out.cost_trace.push_back({level, cost});
        lambda *= config.lambda_shrink;
        relinearize = true;
        if (rel < config.rel_tol) {
          level_converged = true;
          reason = "relative decrease";
          break;
        }
      } else {
        lambda *= config.lambda_grow;
      }
    }
    if (level == 0) {
      out.converged = level_converged;
      out.message = reason;
    }
  }
  out.pose = vars.pose;
  out.y = vars.y;
  out.affine1 = vars.affine1;
  return out;
}

/// Dense conditional-mean log-depth of frame 0 from a two-frame result.
inline Eigen::VectorXd two_frame_dense_log_depth(const TwoFrameResult& r, const KernelField& field,
                                                 const GPHyperparams& hyper, int width, int height) {
  return Conditioner(r.inducing, field, hyper).posterior(r.y, r.m, grid_coords(width, height), CovRequest::diag()).mean;
}

}  // namespace dcov
