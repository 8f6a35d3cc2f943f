#pragma once

#include <array>
#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dcov/errors.hpp"

namespace dcov {

/// Cholesky factor of a symmetric PD matrix together with the diagonal jitter
/// that was needed to obtain it.
struct Cholesky {
  Eigen::MatrixXd lower;
  double jitter = 0.0;

  Eigen::Index size() const { return lower.rows(); }

  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const {
    Eigen::MatrixXd x = lower.triangularView<Eigen::Lower>().solve(b);
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    Eigen::VectorXd x = lower.triangularView<Eigen::Lower>().solve(b);
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }
  /// L^-1 b
  Eigen::MatrixXd forward(const Eigen::MatrixXd& b) const {
    return lower.triangularView<Eigen::Lower>().solve(b);
  }
  Eigen::VectorXd forward(const Eigen::VectorXd& b) const {
    return lower.triangularView<Eigen::Lower>().solve(b);
  }
  double log_det() const { return 2.0 * lower.diagonal().array().log().sum(); }
};

namespace detail {
inline bool try_llt(const Eigen::MatrixXd& a, Eigen::MatrixXd& lower) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) return false;
  lower = llt.matrixL();
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    const double d = lower(i, i);
    if (!(std::isfinite(d) && d > 0.0)) return false;
  }
  return lower.allFinite();
}
}  // namespace detail

/// Relative jitter levels tried after a plain factorization fails. Each level
/// is scaled by the mean diagonal magnitude of the input.
inline constexpr std::array<double, 2> kJitterLevels{1e-10, 1e-8};

inline Cholesky cholesky_with_jitter(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw NumericalError("cholesky of a non-square matrix");
  Cholesky out;
  if (a.rows() == 0) return out;
  if (detail::try_llt(a, out.lower)) return out;
  const double scale = std::max(a.diagonal().cwiseAbs().mean(), 1e-300);
  for (double level : kJitterLevels) {
    Eigen::MatrixXd jittered = a;
    jittered.diagonal().array() += level * scale;
    if (detail::try_llt(jittered, out.lower)) {
      out.jitter = level * scale;
      return out;
    }
  }
  throw NumericalError("Cholesky factorization failed after jitter retries");
}

}  // namespace dcov
