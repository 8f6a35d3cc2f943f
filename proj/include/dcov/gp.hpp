#pragma once

#include <cmath>
#include <numbers>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/kernel.hpp"
#include "dcov/linalg.hpp"
#include "dcov/parallel.hpp"

namespace dcov {

/// Log-depth samples at normalized coordinates.
struct LogDepthObservations {
  std::vector<NormalizedCoord> coords;
  Eigen::VectorXd y;

  std::size_t size() const { return coords.size(); }

  void validate() const {
    if (static_cast<Eigen::Index>(coords.size()) != y.size()) {
      throw DomainError("observation coordinate and value counts differ");
    }
    for (const auto& c : coords) validate_coord(c);
    if (!y.allFinite()) throw DomainError("non-finite log-depth observation");
  }
};

/// Mean log-depth shared by all points of an image.
struct ScaleVariable {
  double m = 0.0;
};

struct CovRequest {
  enum class Kind { Full, Block, Diag };
  Kind kind = Kind::Diag;
  int block_dim = 1;

  static CovRequest full() { return {Kind::Full, 0}; }
  static CovRequest diag() { return {Kind::Diag, 1}; }
  static CovRequest block(int d) {
    if (d < 1) throw DomainError("block dimension must be >= 1");
    return {Kind::Block, d};
  }
};

struct FullCov {
  Eigen::MatrixXd matrix;
};

/// Consecutive blocks of the query order; the last block may be smaller.
struct BlockCov {
  int block_dim = 1;
  std::vector<Eigen::MatrixXd> blocks;
};

struct DiagCov {
  Eigen::VectorXd variance;
};

struct Posterior {
  Eigen::VectorXd mean;
  std::variant<FullCov, BlockCov, DiagCov> cov;

  /// Per-point variances extracted from whichever covariance form is held.
  Eigen::VectorXd variances() const {
    if (const auto* f = std::get_if<FullCov>(&cov)) return f->matrix.diagonal();
    if (const auto* d = std::get_if<DiagCov>(&cov)) return d->variance;
    const auto& b = std::get<BlockCov>(cov);
    Eigen::VectorXd out(mean.size());
    Eigen::Index o = 0;
    for (const auto& blk : b.blocks) {
      out.segment(o, blk.rows()) = blk.diagonal();
      o += blk.rows();
    }
    return out;
  }
};

namespace detail {

// Posterior covariance entries are formed one at a time from the same kernel
// call and the same column dot product, so every covariance shape yields
// bitwise identical values for shared entries.
inline double posterior_entry(const std::vector<KernelPoint>& q, const Eigen::MatrixXd& w,
                              Eigen::Index i, Eigen::Index j, const GPHyperparams& hyper) {
  const double prior = point_cov(q[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(j)], hyper);
  const double reduction = w.rows() > 0 ? w.col(i).dot(w.col(j)) : 0.0;
  const double value = prior - reduction;
  return i == j ? std::max(0.0, value) : value;
}

inline Eigen::MatrixXd posterior_block(const std::vector<KernelPoint>& q, const Eigen::MatrixXd& w,
                                       Eigen::Index begin, Eigen::Index count,
                                       const GPHyperparams& hyper) {
  Eigen::MatrixXd out(count, count);
  for (Eigen::Index b = 0; b < count; ++b) {
    for (Eigen::Index a = 0; a <= b; ++a) {
      out(a, b) = posterior_entry(q, w, begin + a, begin + b, hyper);
      out(b, a) = out(a, b);
    }
  }
  return out;
}

inline std::variant<FullCov, BlockCov, DiagCov> posterior_cov(const std::vector<KernelPoint>& q,
                                                              const Eigen::MatrixXd& w,
                                                              const CovRequest& request,
                                                              const GPHyperparams& hyper) {
  const auto f = static_cast<Eigen::Index>(q.size());
  switch (request.kind) {
    case CovRequest::Kind::Diag: {
      DiagCov d{Eigen::VectorXd(f)};
      parallel_for(q.size(), [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        d.variance(ii) = posterior_entry(q, w, ii, ii, hyper);
      });
      return d;
    }
    case CovRequest::Kind::Full: {
      FullCov full{Eigen::MatrixXd(f, f)};
      parallel_for(q.size(), [&](std::size_t jj) {
        const auto j = static_cast<Eigen::Index>(jj);
        for (Eigen::Index i = 0; i <= j; ++i) full.matrix(i, j) = posterior_entry(q, w, i, j, hyper);
      });
      for (Eigen::Index j = 0; j < f; ++j)
        for (Eigen::Index i = 0; i < j; ++i) full.matrix(j, i) = full.matrix(i, j);
      return full;
    }
    case CovRequest::Kind::Block: {
      const Eigen::Index d = request.block_dim;
      BlockCov out{request.block_dim, {}};
      const Eigen::Index count = (f + d - 1) / d;
      out.blocks.resize(static_cast<std::size_t>(count));
      parallel_for(static_cast<std::size_t>(count), [&](std::size_t b) {
        const Eigen::Index begin = static_cast<Eigen::Index>(b) * d;
        out.blocks[b] = posterior_block(q, w, begin, std::min(d, f - begin), hyper);
      });
      return out;
    }
  }
  throw ConfigError("unknown covariance request");
}

}  // namespace detail

/// Gaussian prior N(m 1, K) over the log-depths at `coords`.
inline Posterior prior(const std::vector<NormalizedCoord>& coords, const KernelField& field,
                       const GPHyperparams& hyper, double m,
                       const CovRequest& request = CovRequest::full()) {
  if (coords.empty()) throw DomainError("prior requires at least one coordinate");
  hyper.validate();
  const auto pts = prepare_points(coords, field);
  Posterior out;
  out.mean = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(coords.size()), m);
  out.cov = detail::posterior_cov(pts, Eigen::MatrixXd(0, static_cast<Eigen::Index>(pts.size())),
                                  request, hyper);
  return out;
}

/// Conditioning machinery shared by `condition` and callers that need the
/// linear predictive operator (photometric factors, keyframe initialization).
class Conditioner {
 public:
  Conditioner(const std::vector<NormalizedCoord>& obs_coords, const KernelField& field,
              const GPHyperparams& hyper)
      : hyper_(hyper), field_(&field) {
    hyper.validate();
    points_ = prepare_points(obs_coords, field);
    if (!points_.empty()) {
      Eigen::MatrixXd a = cov_matrix(points_, hyper);
      a.diagonal().array() += hyper.sigma_n_sq;
      chol_ = cholesky_with_jitter(a);
    }
  }

  std::size_t size() const { return points_.size(); }
  const Cholesky& factor() const { return chol_; }
  const std::vector<KernelPoint>& points() const { return points_; }

  /// W = L^-1 K_nf for the query points.
  Eigen::MatrixXd whitened_cross(const std::vector<KernelPoint>& query) const {
    if (points_.empty()) return Eigen::MatrixXd(0, static_cast<Eigen::Index>(query.size()));
    return chol_.forward(cross_cov(points_, query, hyper_));
  }

  /// Predictive operator C = K_fn (K_nn + sigma_n^2 I)^-1 so that the mean is
  /// m + C (y - m).
  Eigen::MatrixXd predictive_operator(const std::vector<NormalizedCoord>& query) const {
    const auto q = prepare_points(query, *field_);
    if (points_.empty()) return Eigen::MatrixXd(static_cast<Eigen::Index>(q.size()), 0);
    return chol_.solve(cross_cov(points_, q, hyper_)).transpose();
  }

  Posterior posterior(const Eigen::VectorXd& y, double m, const std::vector<NormalizedCoord>& query,
                      const CovRequest& request) const {
    if (y.size() != static_cast<Eigen::Index>(points_.size())) {
      throw DomainError("observation value count does not match coordinates");
    }
    const auto q = prepare_points(query, *field_);
    const Eigen::MatrixXd w = whitened_cross(q);
    Posterior out;
    out.mean = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(q.size()), m);
    if (!points_.empty()) {
      const Eigen::VectorXd white = chol_.forward(Eigen::VectorXd(y.array() - m));
      out.mean.noalias() += w.transpose() * white;
    }
    out.cov = detail::posterior_cov(q, w, request, hyper_);
    return out;
  }

 private:
  GPHyperparams hyper_;
  const KernelField* field_;
  std::vector<KernelPoint> points_;
  Cholesky chol_;
};

/// Predictive distribution at `query` given log-depth observations. With no
/// observations the prior is returned.
inline Posterior condition(const LogDepthObservations& obs, double m,
                           const std::vector<NormalizedCoord>& query, const KernelField& field,
                           const GPHyperparams& hyper,
                           const CovRequest& request = CovRequest::diag()) {
  obs.validate();
  if (!std::isfinite(m)) throw InvalidParameter("non-finite scale variable");
  return Conditioner(obs.coords, field, hyper).posterior(obs.y, m, query, request);
}

/// Minimizer of (y - m 1)^T A^-1 (y - m 1) over m. `solver` is anything with
/// solve(VectorXd) applying A^-1.
template <typename Solver>
ScaleVariable optimal_scale(const Eigen::VectorXd& y, const Solver& solver) {
  if (y.size() == 0) throw DomainError("optimal_scale requires observations");
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(y.size());
  const Eigen::VectorXd s = solver.solve(ones);
  const double denom = s.sum();
  if (!(denom > 0.0) || !std::isfinite(denom)) throw NumericalError("degenerate optimal scale");
  return {s.dot(y) / denom};
}

/// Dense factorization of K_ff + sigma_n^2 I for a set of observations.
inline Cholesky factorize_observations(const LogDepthObservations& obs, const KernelField& field,
                                       const GPHyperparams& hyper) {
  obs.validate();
  Eigen::MatrixXd a = build_cov_matrix(obs.coords, field, hyper);
  a.diagonal().array() += hyper.sigma_n_sq;
  return cholesky_with_jitter(a);
}

inline double gaussian_nll(const Eigen::VectorXd& residual, const Cholesky& chol) {
  const Eigen::VectorXd white = chol.forward(residual);
  const double n = static_cast<double>(residual.size());
  return 0.5 * white.squaredNorm() + 0.5 * n * std::log(2.0 * std::numbers::pi) +
         0.5 * chol.log_det();
}

/// Exact negative log marginal likelihood in nats.
inline double nlml(const LogDepthObservations& obs, double m, const KernelField& field,
                   const GPHyperparams& hyper) {
  if (obs.size() == 0) throw DomainError("nlml requires at least one observation");
  const Cholesky chol = factorize_observations(obs, field, hyper);
  return gaussian_nll(Eigen::VectorXd(obs.y.array() - m), chol);
}

/// Implicit Nyström approximation K_fu K_uu^-1 K_uf held as V^T V with
/// V = L_uu^-1 K_uf.
class NystromApproximation {
 public:
  NystromApproximation(const Eigen::MatrixXd& k_uu, const Eigen::MatrixXd& k_uf)
      : chol_(cholesky_with_jitter(k_uu)) {
    if (k_uf.rows() != k_uu.rows()) throw DomainError("K_uu / K_uf dimension mismatch");
    v_ = chol_.forward(k_uf);
  }

  const Eigen::MatrixXd& factor() const { return v_; }
  Eigen::Index rank() const { return v_.rows(); }
  Eigen::Index size() const { return v_.cols(); }

  Eigen::VectorXd diagonal() const { return v_.colwise().squaredNorm().transpose(); }
  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const { return v_.transpose() * (v_ * x); }
  /// Materialized approximation; intended for small problems and tests.
  Eigen::MatrixXd dense() const { return v_.transpose() * v_; }

 private:
  Cholesky chol_;
  Eigen::MatrixXd v_;
};

inline NystromApproximation nystrom(const Eigen::MatrixXd& k_uu, const Eigen::MatrixXd& k_uf) {
  return NystromApproximation(k_uu, k_uf);
}

/// (Q + sigma^2 I) with Q = V^T V of rank u, solved and log-determined through
/// the u x u capacitance matrix B = I + V V^T / sigma^2.
class LowRankPlusNoise {
 public:
  LowRankPlusNoise(const Eigen::MatrixXd& v, double noise) : v_(v), noise_(noise) {
    Eigen::MatrixXd b = Eigen::MatrixXd::Identity(v.rows(), v.rows());
    b.noalias() += v * v.transpose() / noise;
    cap_ = cholesky_with_jitter(b);
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& r) const {
    if (v_.rows() == 0) return r / noise_;
    const Eigen::VectorXd beta = cap_.solve(Eigen::VectorXd(v_ * r));
    return (r - v_.transpose() * beta / noise_) / noise_;
  }
  double log_det() const {
    return static_cast<double>(v_.cols()) * std::log(noise_) + cap_.log_det();
  }
  const Cholesky& capacitance() const { return cap_; }

 private:
  Eigen::MatrixXd v_;
  double noise_;
  Cholesky cap_;
};

struct VfeOptions {
  /// Extra diagonal on K_uu, relative to sigma_f^2. Zero reproduces the exact
  /// Nyström construction.
  double inducing_jitter = 0.0;
  bool compute_gradient = true;
  /// Replace m by its closed-form minimizer under the sparse covariance.
  bool profile_mean = false;
};

struct VfeResult {
  double loss = 0.0;
  /// Mean log-depth the loss was evaluated at.
  double m = 0.0;
  double data_term = 0.0;
  double log_det_term = 0.0;
  double constant_term = 0.0;
  double trace_term = 0.0;
  /// dF/d(raw) per observation, one row per point.
  Eigen::MatrixX3d d_point_raw;
  /// dF/d(raw) per field pixel, interleaved like KernelField::data().
  std::vector<double> d_field;
  double d_sigma_f_sq = 0.0;
  double d_sigma_n_sq = 0.0;
  double d_m = 0.0;
};

/// Variational free energy on points whose raw kernel parameters are already
/// interpolated. Gradients are returned per point.
inline VfeResult vfe_points(const std::vector<KernelPoint>& pts, const Eigen::VectorXd& y,
                            const std::vector<std::size_t>& inducing, double m,
                            const GPHyperparams& hyper, const VfeOptions& options = {}) {
  hyper.validate();
  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto u = static_cast<Eigen::Index>(inducing.size());
  if (n == 0) throw DomainError("vfe requires observations");
  if (y.size() != n) throw DomainError("vfe observation count mismatch");
  {
    std::vector<bool> seen(pts.size(), false);
    for (std::size_t idx : inducing) {
      if (idx >= pts.size() || seen[idx]) throw DomainError("inducing indices must be valid and distinct");
      seen[idx] = true;
    }
  }
  const double noise = hyper.sigma_n_sq;

  std::vector<KernelPoint> ind_pts(inducing.size());
  for (std::size_t p = 0; p < inducing.size(); ++p) ind_pts[p] = pts[inducing[p]];
  Eigen::MatrixXd k_uu = cov_matrix(ind_pts, hyper);
  const double jitter = options.inducing_jitter * hyper.sigma_f_sq;
  k_uu.diagonal().array() += jitter;
  const Eigen::MatrixXd k_uf = cross_cov(ind_pts, pts, hyper);
  Eigen::VectorXd diag_ff(n);
  for (Eigen::Index i = 0; i < n; ++i) diag_ff(i) = point_cov(pts[i], pts[i], hyper);

  const Cholesky l_uu = cholesky_with_jitter(k_uu);
  const Eigen::MatrixXd v = u > 0 ? l_uu.forward(k_uf) : Eigen::MatrixXd(0, n);
  const LowRankPlusNoise a(v, noise);

  if (options.profile_mean) m = optimal_scale(y, a).m;
  const Eigen::VectorXd r = y.array() - m;
  const Eigen::VectorXd alpha = a.solve(r);
  const Eigen::VectorXd q_diag = v.colwise().squaredNorm().transpose();

  VfeResult out;
  out.m = m;
  out.data_term = 0.5 * r.dot(alpha);
  out.log_det_term = 0.5 * a.log_det();
  out.constant_term = 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  out.trace_term = (diag_ff.sum() - q_diag.sum()) / (2.0 * noise);
  out.loss = out.data_term + out.log_det_term + out.constant_term + out.trace_term;
  if (!options.compute_gradient) return out;

  // Adjoint of Q = K_fu K_uu^-1 K_uf is G = A^-1/2 - alpha alpha^T/2 - I/(2 sigma^2).
  // With W = K_uu^-1 K_uf:  dF/dK_uf = 2 W G,  dF/dK_uu = -W G W^T.
  const Eigen::MatrixXd w = u > 0 ? l_uu.lower.transpose().triangularView<Eigen::Upper>().solve(v)
                                  : Eigen::MatrixXd(0, n);
  const Eigen::MatrixXd binv_v = u > 0 ? a.capacitance().solve(v) : Eigen::MatrixXd(0, n);
  Eigen::MatrixXd w_ainv = w;  // W A^-1
  if (u > 0) {
    const Eigen::MatrixXd wvt = w * v.transpose();
    w_ainv.noalias() -= wvt * binv_v / noise;
  }
  w_ainv /= noise;
  const Eigen::VectorXd w_alpha = w * alpha;
  Eigen::MatrixXd g_uf = w_ainv - w_alpha * alpha.transpose() - w / noise;
  Eigen::MatrixXd g_uu = -(0.5 * w_ainv * w.transpose() - 0.5 * w_alpha * w_alpha.transpose() -
                           w * w.transpose() / (2.0 * noise));

  const double trace_ainv = static_cast<double>(n) / noise - (v.array() * binv_v.array()).sum() / (noise * noise);
  out.d_sigma_n_sq = 0.5 * trace_ainv - 0.5 * alpha.squaredNorm() -
                     (diag_ff.sum() - q_diag.sum()) / (2.0 * noise * noise);
  out.d_m = -alpha.sum();

  // Every kernel entry (and the relative jitter) is linear in sigma_f^2.
  out.d_sigma_f_sq = ((g_uu.array() * k_uu.array()).sum() + (g_uf.array() * k_uf.array()).sum() +
                      diag_ff.sum() / (2.0 * noise)) /
                     hyper.sigma_f_sq;

  Eigen::MatrixX3d grad = Eigen::MatrixX3d::Zero(n, 3);
  auto accumulate = [&](std::size_t i, const RawKernelParams& d, double weight) {
    for (int c = 0; c < 3; ++c) grad(static_cast<Eigen::Index>(i), c) += weight * d[c];
  };
  // Rows of K_uf and K_uu indexed by inducing slot p, computed serially per
  // slot for a deterministic accumulation order.
  std::vector<Eigen::MatrixX3d> row_grad(inducing.size(), Eigen::MatrixX3d::Zero(n, 3));
  std::vector<RawKernelParams> slot_grad(inducing.size(), RawKernelParams{0, 0, 0});
  parallel_for(inducing.size(), [&](std::size_t p) {
    const auto pp = static_cast<Eigen::Index>(p);
    const KernelPoint& xp = ind_pts[p];
    RawKernelParams acc{0, 0, 0};
    for (Eigen::Index i = 0; i < n; ++i) {
      const double weight = g_uf(pp, i);
      if (weight == 0.0) continue;
      const auto g = nonstationary_cov_grad(xp.x, xp.raw, pts[i].x, pts[i].raw, hyper);
      for (int c = 0; c < 3; ++c) {
        acc[c] += weight * g.d_raw_i[c];
        row_grad[p](i, c) += weight * g.d_raw_j[c];
      }
    }
    for (Eigen::Index qq = 0; qq < u; ++qq) {
      const double weight = g_uu(pp, qq);
      if (weight == 0.0) continue;
      const KernelPoint& xq = ind_pts[static_cast<std::size_t>(qq)];
      const auto g = nonstationary_cov_grad(xp.x, xp.raw, xq.x, xq.raw, hyper);
      for (int c = 0; c < 3; ++c) {
        acc[c] += weight * g.d_raw_i[c];
        row_grad[p](static_cast<Eigen::Index>(inducing[static_cast<std::size_t>(qq)]), c) +=
            weight * g.d_raw_j[c];
      }
    }
    slot_grad[p] = acc;
  });
  for (std::size_t p = 0; p < inducing.size(); ++p) {
    grad += row_grad[p];
    accumulate(inducing[p], slot_grad[p], 1.0);
  }
  // The diagonal of K_ff is sigma_f^2 / 2 regardless of the kernel matrices,
  // but it is differentiated anyway so the gradient does not rely on that.
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = nonstationary_cov_grad(pts[i].x, pts[i].raw, pts[i].x, pts[i].raw, hyper);
    RawKernelParams d{g.d_raw_i[0] + g.d_raw_j[0], g.d_raw_i[1] + g.d_raw_j[1],
                      g.d_raw_i[2] + g.d_raw_j[2]};
    accumulate(static_cast<std::size_t>(i), d, 1.0 / (2.0 * noise));
  }
  out.d_point_raw = std::move(grad);
  return out;
}

/// Scatters per-point raw gradients to the field pixels through the bilinear
/// lookup weights.
inline std::vector<double> scatter_to_field(const Eigen::MatrixX3d& d_point_raw,
                                            const std::vector<NormalizedCoord>& coords,
                                            int width, int height) {
  std::vector<double> out(static_cast<std::size_t>(width) * height * 3, 0.0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const BilinearTaps taps = bilinear_taps(width, height, coords[i]);
    for (int k = 0; k < 4; ++k) {
      for (int c = 0; c < 3; ++c) {
        out[taps.index[k] * 3 + c] +=
            taps.weight[k] * d_point_raw(static_cast<Eigen::Index>(i), c);
      }
    }
  }
  return out;
}

/// Variational free energy of the sparse GP with inducing points taken from
/// the observations, with gradients with respect to the field pixels,
/// sigma_f^2, sigma_n^2 and m.
inline VfeResult vfe(const LogDepthObservations& obs, const std::vector<std::size_t>& inducing,
                     double m, const KernelField& field, const GPHyperparams& hyper,
                     const VfeOptions& options = {}) {
  obs.validate();
  const auto pts = prepare_points(obs.coords, field);
  VfeResult out = vfe_points(pts, obs.y, inducing, m, hyper, options);
  if (options.compute_gradient) {
    out.d_field = scatter_to_field(out.d_point_raw, obs.coords, field.width(), field.height());
  }
  return out;
}

}  // namespace dcov
