#pragma once

// Small-window bundle adjustment with GP depth-prior factors.
//
// Variables: one left-perturbed pose per frame, one 3D landmark per track and,
// when the depth prior is enabled, one mean log-depth m_c per frame.
// The depth prior of frame c is 1/2 |L_c^-1 (log z_c - m_c 1)|^2, with L_c the
// Cholesky factor of K_c + sigma_n^2 I evaluated at the measured pixels of the
// landmarks seen in that frame.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/geometry.hpp"
#include "dcov/gp.hpp"
#include "dcov/kernel.hpp"
#include "dcov/linalg.hpp"
#include "dcov/parallel.hpp"
#include "dcov/robust.hpp"

namespace dcov {

struct Measurement {
  int frame = 0;
  int landmark = 0;
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  double sigma = 1.0;
};

struct FramePrior {
  KernelField field;
  GPHyperparams hyper;
};

struct BAConfig {
  bool use_depth_prior = true;
  double huber_delta = 1.345;
  double gauge_sigma = 1e-6;
  int max_iters = 100;
  double initial_lambda = 1e-3;
  double lambda_shrink = 0.5;
  double lambda_grow = 4.0;
  double rel_tol = 1e-8;
  double step_tol = 1e-10;
  int max_factor_retries = 10;
  // Undamped Gauss-Newton steps after LM stops, accepted on gradient-norm
  // decrease. Cost differences near the optimum drown in rounding.
  int polish_iters = 50;

  void validate() const {
    if (polish_iters < 0) throw ConfigError("ba polish_iters must be non-negative");
    if (!(huber_delta > 0) || !(gauge_sigma > 0)) throw ConfigError("ba huber delta and gauge sigma must be positive");
    if (max_iters < 0 || max_factor_retries < 0) throw ConfigError("ba iteration limits must be non-negative");
    if (!(initial_lambda > 0) || !(lambda_shrink > 0 && lambda_shrink < 1) || !(lambda_grow > 1)) {
      throw ConfigError("invalid ba damping schedule");
    }
    if (!(rel_tol >= 0) || !(step_tol >= 0)) throw ConfigError("ba tolerances must be non-negative");
  }
};

struct BAProblem {
  Intrinsics camera;
  std::vector<Pose> poses;
  std::vector<Eigen::Vector3d> landmarks;
  std::vector<Measurement> measurements;
  /// One per frame; used only with the depth prior.
  std::vector<FramePrior> priors;
  /// Mean log-depth per frame.
  std::vector<double> m;
  /// Gauge anchors for the first pose and the first frame's m.
  Pose gauge_pose;
  double gauge_m = 0.0;

  std::size_t frames() const { return poses.size(); }

  void validate(bool with_prior) const {
    camera.validate();
    if (poses.empty()) throw DomainError("bundle adjustment needs at least one frame");
    if (m.size() != poses.size()) throw DomainError("one mean log-depth per frame required");
    if (with_prior && priors.size() != poses.size()) throw DomainError("one kernel prior per frame required");
    std::vector<int> seen(landmarks.size(), 0);
    for (const auto& z : measurements) {
      if (z.frame < 0 || static_cast<std::size_t>(z.frame) >= poses.size()) throw DomainError("measurement frame out of range");
      if (z.landmark < 0 || static_cast<std::size_t>(z.landmark) >= landmarks.size()) {
        throw DomainError("measurement landmark out of range");
      }
      if (!(z.sigma > 0)) throw DomainError("measurement sigma must be positive");
      if (!camera.contains(z.pixel)) throw DomainError("measurement outside the image");
      ++seen[static_cast<std::size_t>(z.landmark)];
    }
    for (int s : seen) {
      if (s < 2) throw DomainError("every landmark needs at least two observations");
    }
  }
};

// Factors ----------------------------------------------------------------------

struct ReprojectionLinearization {
  Eigen::Vector2d residual;
  Mat26 d_pose;
  Eigen::Matrix<double, 2, 3> d_point;
};

/// (pi(T P) - x) / sigma. Throws CheiralityError if P is not in front of T.
inline ReprojectionLinearization reprojection_factor(const Pose& pose, const Eigen::Vector3d& p,
                                                     const Measurement& z, const Intrinsics& k) {
  const Eigen::Vector3d pc = pose * p;
  ReprojectionLinearization out;
  out.residual = (project_camera(pc, k) - z.pixel) / z.sigma;
  const Eigen::Matrix<double, 2, 3> dpi = projection_jacobian(pc, k) / z.sigma;
  out.d_pose = dpi * point_jacobian_left(pc);
  out.d_point = dpi * pose.rotation();
  return out;
}

inline Eigen::Vector2d reprojection_residual(const Pose& pose, const Eigen::Vector3d& p,
                                             const Measurement& z, const Intrinsics& k) {
  return (project(pose, p, k) - z.pixel) / z.sigma;
}

/// Whitening data of one frame's depth prior.
struct DepthPrior {
  int frame = 0;
  std::vector<int> landmarks;
  Cholesky chol;
};

struct DepthPriorLinearization {
  Eigen::VectorXd residual;
  /// Columns: pose twist (6), each landmark (3 per landmark), m (1).
  Eigen::MatrixXd jacobian;
};

/// L^-1 (log z - m 1) with z the camera-frame depths. Throws CheiralityError
/// on a non-positive depth.
inline DepthPriorLinearization depth_prior_factor(const Pose& pose, const std::vector<Eigen::Vector3d>& points,
                                                  double m, const Cholesky& chol) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (chol.size() != n) throw DomainError("depth prior size mismatch");
  Eigen::VectorXd e(n);
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, 7 + 3 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d pc = pose * points[static_cast<std::size_t>(i)];
    if (!(pc.z() > 0)) throw CheiralityError("non-positive landmark depth in depth prior");
    e(i) = std::log(pc.z()) - m;
    const double iz = 1.0 / pc.z();
    j.block<1, 6>(i, 0) = iz * point_jacobian_left(pc).row(2);
    j.block<1, 3>(i, 6 + 3 * i) = iz * pose.rotation().row(2);
    j(i, 6 + 3 * n) = -1.0;
  }
  DepthPriorLinearization out;
  out.residual = chol.forward(e);
  out.jacobian = chol.forward(j);
  return out;
}

struct GaugeLinearization {
  Vec6 residual;
  Eigen::Matrix<double, 6, 6> d_pose;
};

/// (log(R R_ref^T), t - t_ref) / sigma
inline GaugeLinearization gauge_pose_factor(const Pose& pose, const Pose& ref, double sigma) {
  GaugeLinearization out;
  const Eigen::Vector3d phi = so3_log(pose.rotation() * ref.rotation().transpose());
  out.residual << phi, pose.translation() - ref.translation();
  out.residual /= sigma;
  out.d_pose.setZero();
  out.d_pose.topLeftCorner<3, 3>() = so3_left_jacobian_inv(phi);
  out.d_pose.bottomLeftCorner<3, 3>() = -skew(pose.translation());
  out.d_pose.bottomRightCorner<3, 3>() = Eigen::Matrix3d::Identity();
  out.d_pose /= sigma;
  return out;
}

/// Builds one depth prior per frame from the measured pixels of the
/// landmarks it observes (first measurement per landmark and frame).
inline std::vector<DepthPrior> build_depth_priors(const BAProblem& problem) {
  std::vector<DepthPrior> out;
  for (std::size_t c = 0; c < problem.frames(); ++c) {
    std::map<int, Eigen::Vector2d> seen;
    for (const auto& z : problem.measurements) {
      if (static_cast<std::size_t>(z.frame) == c) seen.emplace(z.landmark, z.pixel);
    }
    if (seen.empty()) continue;
    DepthPrior dp;
    dp.frame = static_cast<int>(c);
    std::vector<NormalizedCoord> coords;
    for (const auto& [id, px] : seen) {
      dp.landmarks.push_back(id);
      coords.push_back(problem.camera.normalized(px));
    }
    const FramePrior& fp = problem.priors[c];
    Eigen::MatrixXd k = build_cov_matrix(coords, fp.field, fp.hyper);
    k.diagonal().array() += fp.hyper.sigma_n_sq;
    dp.chol = cholesky_with_jitter(k);
    out.push_back(std::move(dp));
  }
  return out;
}

// Optimizer ------------------------------------------------------------------------

struct LMState {
  double lambda = 0.0;
  /// Cost at the start and after each accepted step.
  std::vector<double> cost_trace;
  int iterations = 0;
  int rejected = 0;
  /// Factors skipped for cheirality during linearization.
  int deactivated = 0;
  bool converged = false;
  std::string stop_reason;
};

namespace detail {

struct BALayout {
  std::size_t frames, points;
  bool with_m;
  Eigen::Index pose(std::size_t c) const { return static_cast<Eigen::Index>(6 * c); }
  Eigen::Index point(std::size_t l) const { return static_cast<Eigen::Index>(6 * frames + 3 * l); }
  Eigen::Index mean(std::size_t c) const { return static_cast<Eigen::Index>(6 * frames + 3 * points + c); }
  Eigen::Index size() const {
    return static_cast<Eigen::Index>(6 * frames + 3 * points + (with_m ? frames : 0));
  }
};

struct Active {
  std::vector<bool> measurements;
  std::vector<bool> priors;
};

class BAEvaluator {
 public:
  BAEvaluator(const BAProblem& p, const BAConfig& cfg)
      : cfg_(cfg), layout_{p.frames(), p.landmarks.size(), cfg.use_depth_prior} {
    if (cfg.use_depth_prior) priors_ = build_depth_priors(p);
  }

  const BALayout& layout() const { return layout_; }
  const std::vector<DepthPrior>& priors() const { return priors_; }

  std::vector<Eigen::Vector3d> prior_points(const BAProblem& p, const DepthPrior& dp) const {
    std::vector<Eigen::Vector3d> pts;
    pts.reserve(dp.landmarks.size());
    for (int id : dp.landmarks) pts.push_back(p.landmarks[static_cast<std::size_t>(id)]);
    return pts;
  }

  /// Robust cost over the active factors; +inf if an active factor fails.
  double cost(const BAProblem& p, const Active& active) const {
    std::vector<double> terms(p.measurements.size(), 0.0);
    bool failed = false;
    parallel_for(p.measurements.size(), [&](std::size_t i) {
      if (!active.measurements[i]) return;
      const auto& z = p.measurements[i];
      const Eigen::Vector3d pc = p.poses[static_cast<std::size_t>(z.frame)] * p.landmarks[static_cast<std::size_t>(z.landmark)];
      if (!(pc.z() > kMinDepth)) {
        terms[i] = std::numeric_limits<double>::infinity();
        return;
      }
      const Eigen::Vector2d r = (project_camera(pc, p.camera) - z.pixel) / z.sigma;
      terms[i] = huber_cost(r.norm(), cfg_.huber_delta);
    });
    double total = 0.0;
    for (double t : terms) total += t;
    for (std::size_t f = 0; f < priors_.size(); ++f) {
      if (!active.priors[f]) continue;
      const DepthPrior& dp = priors_[f];
      const auto c = static_cast<std::size_t>(dp.frame);
      try {
        const auto lin = depth_prior_factor(p.poses[c], prior_points(p, dp), p.m[c], dp.chol);
        total += 0.5 * lin.residual.squaredNorm();
      } catch (const CheiralityError&) {
        failed = true;
      }
    }
    total += 0.5 * gauge_pose_factor(p.poses[0], p.gauge_pose, cfg_.gauge_sigma).residual.squaredNorm();
    if (layout_.with_m) {
      const double r = (p.m[0] - p.gauge_m) / cfg_.gauge_sigma;
      total += 0.5 * r * r;
    }
    return failed || !std::isfinite(total) ? std::numeric_limits<double>::infinity() : total;
  }

  /// Gauss-Newton system (IRLS-weighted) at the current state.
  void linearize(const BAProblem& p, Active& active, Eigen::MatrixXd& h, Eigen::VectorXd& g, int& deactivated) const {
    const Eigen::Index n = layout_.size();
    h.setZero(n, n);
    g.setZero(n);
    active.measurements.assign(p.measurements.size(), true);
    active.priors.assign(priors_.size(), true);

    std::vector<std::optional<ReprojectionLinearization>> lins(p.measurements.size());
    parallel_for(p.measurements.size(), [&](std::size_t i) {
      const auto& z = p.measurements[i];
      try {
        lins[i] = reprojection_factor(p.poses[static_cast<std::size_t>(z.frame)],
                                      p.landmarks[static_cast<std::size_t>(z.landmark)], z, p.camera);
      } catch (const CheiralityError&) {
        lins[i].reset();
      }
    });
    for (std::size_t i = 0; i < lins.size(); ++i) {
      if (!lins[i]) {
        active.measurements[i] = false;
        ++deactivated;
        continue;
      }
      const auto& z = p.measurements[i];
      const auto& lin = *lins[i];
      const double w = huber_weight(lin.residual.norm(), cfg_.huber_delta);
      Eigen::Matrix<double, 2, 9> j;
      j << lin.d_pose, lin.d_point;
      const Eigen::Index idx[2] = {layout_.pose(static_cast<std::size_t>(z.frame)),
                                   layout_.point(static_cast<std::size_t>(z.landmark))};
      const int width[2] = {6, 3};
      const int off[2] = {0, 6};
      for (int a = 0; a < 2; ++a) {
        g.segment(idx[a], width[a]) += w * j.middleCols(off[a], width[a]).transpose() * lin.residual;
        for (int b = 0; b < 2; ++b) {
          h.block(idx[a], idx[b], width[a], width[b]) +=
              w * j.middleCols(off[a], width[a]).transpose() * j.middleCols(off[b], width[b]);
        }
      }
    }

    for (std::size_t f = 0; f < priors_.size(); ++f) {
      const DepthPrior& dp = priors_[f];
      const auto c = static_cast<std::size_t>(dp.frame);
      DepthPriorLinearization lin;
      try {
        lin = depth_prior_factor(p.poses[c], prior_points(p, dp), p.m[c], dp.chol);
      } catch (const CheiralityError&) {
        active.priors[f] = false;
        ++deactivated;
        continue;
      }
      std::vector<Eigen::Index> idx{layout_.pose(c)};
      std::vector<int> width{6};
      for (int id : dp.landmarks) {
        idx.push_back(layout_.point(static_cast<std::size_t>(id)));
        width.push_back(3);
      }
      idx.push_back(layout_.mean(c));
      width.push_back(1);
      const Eigen::MatrixXd jtj = lin.jacobian.transpose() * lin.jacobian;
      const Eigen::VectorXd jtr = lin.jacobian.transpose() * lin.residual;
      std::vector<Eigen::Index> local(idx.size());
      for (std::size_t a = 1; a < idx.size(); ++a) local[a] = local[a - 1] + width[a - 1];
      for (std::size_t a = 0; a < idx.size(); ++a) {
        g.segment(idx[a], width[a]) += jtr.segment(local[a], width[a]);
        for (std::size_t b = 0; b < idx.size(); ++b) {
          h.block(idx[a], idx[b], width[a], width[b]) += jtj.block(local[a], local[b], width[a], width[b]);
        }
      }
    }

    const auto gauge = gauge_pose_factor(p.poses[0], p.gauge_pose, cfg_.gauge_sigma);
    h.topLeftCorner<6, 6>() += gauge.d_pose.transpose() * gauge.d_pose;
    g.head<6>() += gauge.d_pose.transpose() * gauge.residual;
    if (layout_.with_m) {
      const double s2 = cfg_.gauge_sigma * cfg_.gauge_sigma;
      h(layout_.mean(0), layout_.mean(0)) += 1.0 / s2;
      g(layout_.mean(0)) += (p.m[0] - p.gauge_m) / s2;
    }
  }

  BAProblem apply(const BAProblem& p, const Eigen::VectorXd& delta) const {
    BAProblem out = p;
    for (std::size_t c = 0; c < layout_.frames; ++c) {
      out.poses[c] = perturb(p.poses[c], delta.segment<6>(layout_.pose(c)));
    }
    for (std::size_t l = 0; l < layout_.points; ++l) out.landmarks[l] += delta.segment<3>(layout_.point(l));
    if (layout_.with_m) {
      for (std::size_t c = 0; c < layout_.frames; ++c) out.m[c] += delta(layout_.mean(c));
    }
    return out;
  }

 private:
  BAConfig cfg_;
  BALayout layout_;
  std::vector<DepthPrior> priors_;
};

}  // namespace detail

/// Total robust cost of a problem with all factors active.
inline double ba_cost(const BAProblem& problem, const BAConfig& config) {
  const detail::BAEvaluator ev(problem, config);
  detail::Active active{std::vector<bool>(problem.measurements.size(), true),
                        std::vector<bool>(ev.priors().size(), true)};
  return ev.cost(problem, active);
}

inline LMState lm_optimize(BAProblem& problem, const BAConfig& config) {
  config.validate();
  problem.validate(config.use_depth_prior);
  const detail::BAEvaluator ev(problem, config);

  LMState state;
  state.lambda = config.initial_lambda;
  detail::Active active;
  Eigen::MatrixXd h;
  Eigen::VectorXd g;
  ev.linearize(problem, active, h, g, state.deactivated);
  double cost = ev.cost(problem, active);
  if (!std::isfinite(cost)) throw NumericalError("non-finite initial bundle adjustment cost");
  state.cost_trace.push_back(cost);

  bool relinearize = false;
  for (int it = 0; it < config.max_iters; ++it) {
    state.iterations = it + 1;
    if (relinearize) {
      ev.linearize(problem, active, h, g, state.deactivated);
      cost = ev.cost(problem, active);
      relinearize = false;
    }
    Eigen::VectorXd delta;
    bool solved = false;
    for (int attempt = 0; attempt <= config.max_factor_retries; ++attempt) {
      Eigen::MatrixXd damped = h;
      damped.diagonal().array() += state.lambda;
      const Eigen::LLT<Eigen::MatrixXd> llt(damped);
      if (llt.info() == Eigen::Success) {
        delta = llt.solve(-g);
        if (delta.allFinite()) {
          solved = true;
          break;
        }
      }
      state.lambda *= config.lambda_grow;
    }
    if (!solved) throw NumericalError("normal equations could not be factorized");
    if (delta.norm() < config.step_tol) {
      state.converged = true;
      state.stop_reason = "step";
      break;
    }
    BAProblem trial = ev.apply(problem, delta);
    const double trial_cost = ev.cost(trial, active);
    if (trial_cost < cost) {
      const double rel = (cost - trial_cost) / std::max(cost, std::numeric_limits<double>::min());
      problem = std::move(trial);
      state.cost_trace.push_back(trial_cost);
      cost = trial_cost;
      state.lambda *= config.lambda_shrink;
      relinearize = true;
      if (rel < config.rel_tol) {
        state.converged = true;
        state.stop_reason = "relative decrease";
        break;
      }
    } else {
      ++state.rejected;
      state.lambda *= config.lambda_grow;
    }
  }
  if (state.stop_reason.empty()) state.stop_reason = "max iterations";

  // Progress is measured by the Newton decrement -g.delta: the raw gradient is
  // dominated by rounding in the stiff gauge rows.
  int final_deactivated = 0;
  ev.linearize(problem, active, h, g, final_deactivated);
  const auto newton_step = [](const Eigen::MatrixXd& hh, const Eigen::VectorXd& gg, Eigen::VectorXd& out) {
    const Eigen::LLT<Eigen::MatrixXd> llt(hh);
    if (llt.info() != Eigen::Success) return false;
    out = llt.solve(-gg);
    return out.allFinite();
  };
  Eigen::VectorXd delta;
  if (config.polish_iters > 0 && newton_step(h, g, delta)) {
    double decrement = -g.dot(delta);
    for (int k = 0; k < config.polish_iters; ++k) {
      BAProblem trial = ev.apply(problem, delta);
      const double trial_cost = ev.cost(trial, active);
      if (!(trial_cost <= cost * (1 + 1e-12))) break;
      detail::Active trial_active;
      Eigen::MatrixXd th;
      Eigen::VectorXd tg, td;
      int deact = 0;
      ev.linearize(trial, trial_active, th, tg, deact);
      if (deact > 0 || !newton_step(th, tg, td)) break;
      const double trial_decrement = -tg.dot(td);
      if (!(trial_decrement < decrement)) break;
      problem = std::move(trial);
      active = std::move(trial_active);
      delta = std::move(td);
      decrement = trial_decrement;
      if (trial_cost < state.cost_trace.back()) state.cost_trace.push_back(trial_cost);
      cost = trial_cost;
    }
  }
  return state;
}

// Initialization and densification -----------------------------------------------------

/// Point minimizing the summed squared distance to the viewing rays of its
/// measurements (multi-view midpoint). Throws DegenerateError for parallel rays.
inline Eigen::Vector3d triangulate_midpoint(const std::vector<Pose>& poses, const std::vector<Measurement>& obs,
                                            const Intrinsics& k) {
  Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  for (const auto& z : obs) {
    const Pose& t = poses[static_cast<std::size_t>(z.frame)];
    const Eigen::Vector3d dir = (t.rotation().transpose() * backproject(z.pixel, 1.0, k)).normalized();
    const Eigen::Matrix3d proj = Eigen::Matrix3d::Identity() - dir * dir.transpose();
    a += proj;
    b += proj * t.center();
  }
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto s = svd.singularValues();
  if (!(s(2) > 1e-12 * s(0))) throw DegenerateError("parallel viewing rays");
  return svd.solve(b);
}

/// Landmark initialization by midpoint triangulation. Points that land
/// behind a camera or beyond `max_depth` (in the first observing frame) are
/// placed on that frame's ray at the median depth of the others.
inline std::vector<Eigen::Vector3d> triangulate_landmarks(const std::vector<Pose>& poses,
                                                          const std::vector<Measurement>& measurements,
                                                          std::size_t landmark_count, const Intrinsics& k,
                                                          double max_depth = 1e3) {
  std::vector<std::vector<Measurement>> per(landmark_count);
  for (const auto& z : measurements) per[static_cast<std::size_t>(z.landmark)].push_back(z);
  std::vector<Eigen::Vector3d> out(landmark_count, Eigen::Vector3d::Zero());
  std::vector<bool> ok(landmark_count, false);
  std::vector<double> depths;
  for (std::size_t l = 0; l < landmark_count; ++l) {
    if (per[l].size() < 2) throw DomainError("landmark needs two observations to triangulate");
    try {
      out[l] = triangulate_midpoint(poses, per[l], k);
    } catch (const DegenerateError&) {
      continue;
    }
    bool front = true;
    for (const auto& z : per[l]) {
      const double zc = (poses[static_cast<std::size_t>(z.frame)] * out[l]).z();
      if (!(zc > kMinDepth) || zc > max_depth) front = false;
    }
    if (front) {
      ok[l] = true;
      depths.push_back((poses[static_cast<std::size_t>(per[l][0].frame)] * out[l]).z());
    }
  }
  if (depths.empty()) throw DegenerateError("no landmark could be triangulated");
  std::nth_element(depths.begin(), depths.begin() + static_cast<std::ptrdiff_t>(depths.size() / 2), depths.end());
  const double median = depths[depths.size() / 2];
  for (std::size_t l = 0; l < landmark_count; ++l) {
    if (ok[l]) continue;
    const Measurement& z = per[l][0];
    const Pose& t = poses[static_cast<std::size_t>(z.frame)];
    out[l] = t.inverse() * backproject(z.pixel, median, k);
  }
  return out;
}

/// Mean log-depth of the landmarks measured in each frame.
inline std::vector<double> initial_mean_log_depth(const BAProblem& p) {
  std::vector<double> sum(p.frames(), 0.0);
  std::vector<int> count(p.frames(), 0);
  for (const auto& z : p.measurements) {
    const auto c = static_cast<std::size_t>(z.frame);
    const double zc = (p.poses[c] * p.landmarks[static_cast<std::size_t>(z.landmark)]).z();
    if (zc > kMinDepth) {
      sum[c] += std::log(zc);
      ++count[c];
    }
  }
  std::vector<double> out(p.frames(), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = count[c] ? sum[c] / count[c] : 0.0;
  return out;
}

/// Problem initialized from poses and tracks: landmarks by midpoint
/// triangulation, m_c from the initial depths, gauge anchors at frame 0.
inline BAProblem init_ba_problem(const Intrinsics& camera, std::vector<Pose> poses,
                                 std::vector<Measurement> tracks, std::vector<FramePrior> priors) {
  BAProblem p;
  p.camera = camera;
  p.poses = std::move(poses);
  p.measurements = std::move(tracks);
  p.priors = std::move(priors);
  int max_id = -1;
  for (const auto& z : p.measurements) max_id = std::max(max_id, z.landmark);
  if (max_id < 0) throw DomainError("no tracks to initialize from");
  p.landmarks = triangulate_landmarks(p.poses, p.measurements, static_cast<std::size_t>(max_id) + 1, camera);
  p.m = initial_mean_log_depth(p);
  p.gauge_pose = p.poses[0];
  p.gauge_m = p.m[0];
  return p;
}

struct DenseDepth {
  int width = 0, height = 0;
  /// Row-major rasters.
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Landmark log-depths of frame `c` at their projected normalized coordinates.
inline LogDepthObservations frame_log_depths(const BAProblem& p, std::size_t c) {
  std::map<int, bool> seen;
  for (const auto& z : p.measurements) {
    if (static_cast<std::size_t>(z.frame) == c) seen.emplace(z.landmark, true);
  }
  LogDepthObservations obs;
  std::vector<double> y;
  for (const auto& [id, unused] : seen) {
    const Eigen::Vector3d pc = p.poses[c] * p.landmarks[static_cast<std::size_t>(id)];
    if (!(pc.z() > kMinDepth)) continue;
    const Eigen::Vector2d px = project_camera(pc, p.camera);
    const NormalizedCoord x = p.camera.normalized(px);
    if (!is_valid_coord(x)) continue;
    obs.coords.push_back(x);
    y.push_back(std::log(pc.z()));
  }
  obs.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  return obs;
}

/// Conditions the frame's GP on its landmark log-depths and evaluates the
/// posterior at every pixel of a width x height raster.
inline DenseDepth densify(const BAProblem& p, std::size_t c, const FramePrior& prior, int width, int height) {
  const LogDepthObservations obs = frame_log_depths(p, c);
  if (obs.size() == 0) throw DomainError("no landmark visible in frame");
  const Posterior post = condition(obs, p.m[c], grid_coords(width, height, 1), prior.field, prior.hyper,
                                   CovRequest::diag());
  return {width, height, post.mean, post.variances()};
}

}  // namespace dcov
