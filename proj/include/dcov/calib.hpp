#pragma once

// Calibration of posterior covariances through block Mahalanobis distances.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <variant>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/gp.hpp"
#include "dcov/kernel.hpp"

namespace dcov {

inline double chi2_quantile(int dof, double p) {
  if (dof < 1) throw DomainError("chi-square degrees of freedom must be >= 1");
  if (!(p > 0.0 && p < 1.0)) throw DomainError("chi-square confidence must be in (0, 1)");
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), p);
}

/// Squared Mahalanobis distance per block with the block dimension used.
/// A trailing block smaller than the nominal dimension keeps its own size.
struct BlockDistances {
  std::vector<double> d2;
  std::vector<int> dims;
};

inline BlockDistances block_mahalanobis(const Eigen::VectorXd& residuals, const BlockCov& cov) {
  BlockDistances out;
  Eigen::Index offset = 0;
  for (const auto& blk : cov.blocks) {
    const Eigen::Index d = blk.rows();
    if (offset + d > residuals.size()) throw DomainError("residual length does not match blocks");
    Eigen::LLT<Eigen::MatrixXd> llt(blk);
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all()) {
      throw NumericalError("singular covariance block");
    }
    const Eigen::VectorXd z = llt.matrixL().solve(residuals.segment(offset, d));
    out.d2.push_back(z.squaredNorm());
    out.dims.push_back(static_cast<int>(d));
    offset += d;
  }
  if (offset != residuals.size()) throw DomainError("residual length does not match blocks");
  return out;
}

struct CalibrationCurve {
  int block_dim = 1;
  std::vector<double> expected;
  std::vector<double> observed;

  /// Mean |observed - expected| over levels.
  double mean_abs_error() const {
    double s = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) s += std::abs(observed[i] - expected[i]);
    return expected.empty() ? 0.0 : s / static_cast<double>(expected.size());
  }
  double max_abs_error() const {
    double s = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) s = std::max(s, std::abs(observed[i] - expected[i]));
    return s;
  }
};

/// 0.05, 0.10, ..., 0.95
inline std::vector<double> default_levels() {
  std::vector<double> out;
  for (int i = 1; i <= 19; ++i) out.push_back(0.05 * i);
  return out;
}

inline CalibrationCurve calibration_curve(const BlockDistances& dist, int block_dim,
                                          const std::vector<double>& levels) {
  if (dist.d2.empty()) throw DomainError("calibration needs at least one block");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) throw DomainError("calibration levels must be increasing");
  }
  CalibrationCurve curve;
  curve.block_dim = block_dim;
  std::map<int, double> threshold;
  for (double p : levels) {
    threshold.clear();
    std::size_t hits = 0;
    for (std::size_t b = 0; b < dist.d2.size(); ++b) {
      auto it = threshold.find(dist.dims[b]);
      if (it == threshold.end()) it = threshold.emplace(dist.dims[b], chi2_quantile(dist.dims[b], p)).first;
      if (dist.d2[b] <= it->second) ++hits;
    }
    curve.expected.push_back(p);
    curve.observed.push_back(static_cast<double>(hits) / static_cast<double>(dist.d2.size()));
  }
  return curve;
}

inline CalibrationCurve calibration_curve(const std::vector<double>& d2, int block_dim,
                                          const std::vector<double>& levels) {
  return calibration_curve(BlockDistances{d2, std::vector<int>(d2.size(), block_dim)}, block_dim, levels);
}

/// Groups points into spatially coherent blocks of size D. Points are visited
/// in `seed_order`; each point not yet assigned starts a block and pulls in
/// its D - 1 nearest unassigned neighbours (ties to the lower index). Returns
/// a permutation listing the points block by block; only the last block can
/// be short.
inline std::vector<std::size_t> form_blocks(const std::vector<NormalizedCoord>& coords,
                                            const std::vector<std::size_t>& seed_order, int block_dim) {
  if (block_dim < 1) throw DomainError("block dimension must be >= 1");
  const std::size_t n = coords.size();
  if (seed_order.size() != n) throw DomainError("seed order must be a permutation of the points");
  std::vector<bool> used(n, false), seen(n, false);
  for (std::size_t s : seed_order) {
    if (s >= n || seen[s]) throw DomainError("seed order must be a permutation of the points");
    seen[s] = true;
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  const auto d = static_cast<std::size_t>(block_dim);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t s : seed_order) {
    if (used[s]) continue;
    used[s] = true;
    out.push_back(s);
    if (d == 1) continue;
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      const double du = coords[j].u - coords[s].u, dv = coords[j].v - coords[s].v;
      cand.emplace_back(du * du + dv * dv, j);
    }
    const std::size_t take = std::min(d - 1, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end());
    for (std::size_t k = 0; k < take; ++k) {
      used[cand[k].second] = true;
      out.push_back(cand[k].second);
    }
  }
  return out;
}

/// Distances of `truth - posterior mean` at the query points under the
/// block(D) posterior of a GP conditioned on `obs`. `seed_order` indexes the
/// query points (see form_blocks). If `include_noise`, sigma_n^2 is added to
/// the block diagonals.
inline BlockDistances posterior_block_distances(const LogDepthObservations& obs, double m,
                                                const std::vector<NormalizedCoord>& query,
                                                const Eigen::VectorXd& truth,
                                                const std::vector<std::size_t>& seed_order,
                                                int block_dim, const KernelField& field,
                                                const GPHyperparams& hyper, bool include_noise) {
  if (truth.size() != static_cast<Eigen::Index>(query.size())) throw DomainError("truth size mismatch");
  const auto perm = form_blocks(query, seed_order, block_dim);
  std::vector<NormalizedCoord> ordered(query.size());
  Eigen::VectorXd t(truth.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    ordered[i] = query[perm[i]];
    t(static_cast<Eigen::Index>(i)) = truth(static_cast<Eigen::Index>(perm[i]));
  }
  Posterior post = condition(obs, m, ordered, field, hyper, CovRequest::block(block_dim));
  auto& blocks = std::get<BlockCov>(post.cov);
  if (include_noise) {
    for (auto& b : blocks.blocks) b.diagonal().array() += hyper.sigma_n_sq;
  }
  return block_mahalanobis(t - post.mean, blocks);
}

}  // namespace dcov
