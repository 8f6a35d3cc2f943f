#pragma once

// Greedy active selection by maximum conditional variance.
//
// The state keeps the Cholesky factor L of (K_nn + sigma_n^2 I) over the
// chosen points, one row of L^-1 K_nf per chosen point (over every
// candidate), and the running conditional variances
//     var_j = k(x_j, x_j) - sum_r (L^-1 K_nf)(r, j)^2.
// Appending a point adds one row to L by forward substitution and one row to
// L^-1 K_nf, so each step costs O(k) per candidate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/kernel.hpp"
#include "dcov/linalg.hpp"
#include "dcov/parallel.hpp"

namespace dcov {

/// Candidate points and the covariance they are selected under.
struct SelectionContext {
  std::vector<KernelPoint> candidates;
  GPHyperparams hyper;

  SelectionContext(const std::vector<NormalizedCoord>& coords, const KernelField& field,
                   const GPHyperparams& h)
      : candidates(prepare_points(coords, field)), hyper(h) {
    hyper.validate();
  }

  std::size_t size() const { return candidates.size(); }
  double cov(std::size_t i, std::size_t j) const { return point_cov(candidates[i], candidates[j], hyper); }
};

struct SelectionState {
  std::vector<std::size_t> chosen;
  /// Row r of the lower-triangular factor, length r + 1.
  std::vector<Eigen::VectorXd> chol_rows;
  /// Row r of L^-1 K_nf over all candidates.
  std::vector<Eigen::VectorXd> cross_rows;
  Eigen::VectorXd var;
  std::vector<bool> is_chosen;

  static SelectionState initial(const SelectionContext& ctx) {
    SelectionState s;
    const auto n = static_cast<Eigen::Index>(ctx.size());
    s.var.resize(n);
    for (std::size_t j = 0; j < ctx.size(); ++j) s.var(static_cast<Eigen::Index>(j)) = ctx.cov(j, j);
    s.is_chosen.assign(ctx.size(), false);
    return s;
  }

  /// Dense lower-triangular factor; for inspection and tests.
  Eigen::MatrixXd chol_matrix() const {
    const auto k = static_cast<Eigen::Index>(chol_rows.size());
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(k, k);
    for (Eigen::Index r = 0; r < k; ++r) l.row(r).head(r + 1) = chol_rows[static_cast<std::size_t>(r)].transpose();
    return l;
  }
};

/// Adds candidate `index` to the conditioning set.
inline void chol_append(SelectionState& state, const SelectionContext& ctx, std::size_t index) {
  if (index >= ctx.size()) throw DomainError("selection index out of range");
  if (state.is_chosen[index]) throw DomainError("candidate already chosen");
  const std::size_t k = state.chosen.size();

  // l = L^-1 k(X_chosen, x_new) by forward substitution.
  Eigen::VectorXd row(static_cast<Eigen::Index>(k) + 1);
  for (std::size_t r = 0; r < k; ++r) {
    const Eigen::VectorXd& lr = state.chol_rows[r];
    double acc = ctx.cov(state.chosen[r], index);
    for (std::size_t s = 0; s < r; ++s) acc -= lr(static_cast<Eigen::Index>(s)) * row(static_cast<Eigen::Index>(s));
    row(static_cast<Eigen::Index>(r)) = acc / lr(static_cast<Eigen::Index>(r));
  }
  const double self = ctx.cov(index, index) + ctx.hyper.sigma_n_sq;
  const double pivot_sq = self - row.head(static_cast<Eigen::Index>(k)).squaredNorm();
  double pivot_sq_used = pivot_sq;
  if (!(pivot_sq > 0.0)) {
    pivot_sq_used = std::numeric_limits<double>::quiet_NaN();
    for (double level : kJitterLevels) {
      const double candidate = pivot_sq + level * self;
      if (candidate > 0.0) {
        pivot_sq_used = candidate;
        break;
      }
    }
    if (!(pivot_sq_used > 0.0)) throw NumericalError("non-positive pivot in incremental Cholesky");
  }
  const double pivot = std::sqrt(pivot_sq_used);
  row(static_cast<Eigen::Index>(k)) = pivot;

  const auto n = static_cast<Eigen::Index>(ctx.size());
  Eigen::VectorXd cross(n);
  parallel_for(ctx.size(), [&](std::size_t j) {
    double acc = ctx.cov(index, j);
    for (std::size_t r = 0; r < k; ++r) {
      acc -= row(static_cast<Eigen::Index>(r)) * state.cross_rows[r](static_cast<Eigen::Index>(j));
    }
    const double c = acc / pivot;
    const auto jj = static_cast<Eigen::Index>(j);
    cross(jj) = c;
    state.var(jj) = std::max(0.0, state.var(jj) - c * c);
  });

  state.chosen.push_back(index);
  state.chol_rows.push_back(std::move(row));
  state.cross_rows.push_back(std::move(cross));
  state.is_chosen[index] = true;
}

struct SelectionStop {
  /// Maximum number of points to select.
  std::optional<std::size_t> count;
  /// Stop once no unchosen candidate has variance strictly above this value.
  std::optional<double> max_variance;

  static SelectionStop after(std::size_t k) { return {k, std::nullopt}; }
  static SelectionStop below(double threshold) { return {std::nullopt, threshold}; }
};

struct SelectionResult {
  std::vector<std::size_t> order;
  std::vector<NormalizedCoord> coords;
  /// Conditional variance of each selected point just before it was chosen.
  std::vector<double> variance_before;
  Eigen::VectorXd final_variance;
};

/// Index of the largest variance among unchosen candidates, lowest index on
/// ties. Empty if every candidate is chosen.
inline std::optional<std::size_t> argmax_variance(const SelectionState& state) {
  std::optional<std::size_t> best;
  double best_var = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < state.var.size(); ++j) {
    if (state.is_chosen[static_cast<std::size_t>(j)]) continue;
    if (state.var(j) > best_var) {
      best_var = state.var(j);
      best = static_cast<std::size_t>(j);
    }
  }
  return best;
}

/// Runs greedy selection from an existing state (possibly empty).
inline SelectionResult greedy_select(SelectionState& state, const SelectionContext& ctx,
                                     const SelectionStop& stop) {
  if (ctx.size() == 0) throw DomainError("greedy selection requires candidates");
  if (stop.count && *stop.count > ctx.size()) {
    throw DomainError("requested more selections than candidates");
  }
  SelectionResult out;
  while (true) {
    if (stop.count && out.order.size() >= *stop.count) break;
    const auto best = argmax_variance(state);
    if (!best) break;
    const double v = state.var(static_cast<Eigen::Index>(*best));
    if (stop.max_variance && !(v > *stop.max_variance)) break;
    out.order.push_back(*best);
    out.coords.push_back(ctx.candidates[*best].x);
    out.variance_before.push_back(v);
    chol_append(state, ctx, *best);
  }
  out.final_variance = state.var;
  return out;
}

inline SelectionResult greedy_select(const KernelField& field, const GPHyperparams& hyper,
                                     const std::vector<NormalizedCoord>& candidates,
                                     const SelectionStop& stop) {
  if (candidates.empty()) throw DomainError("greedy selection requires candidates");
  const SelectionContext ctx(candidates, field, hyper);
  SelectionState state = SelectionState::initial(ctx);
  return greedy_select(state, ctx, stop);
}

}  // namespace dcov
