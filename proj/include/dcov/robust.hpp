#pragma once

#include "dcov/errors.hpp"

namespace dcov {

/// IRLS weight of the Huber cost for a whitened residual norm.
inline double huber_weight(double norm, double delta) {
  if (!(delta > 0)) throw DomainError("huber delta must be positive");
  return norm <= delta ? 1.0 : delta / norm;
}

inline double huber_cost(double norm, double delta) {
  return norm <= delta ? 0.5 * norm * norm : delta * (norm - 0.5 * delta);
}

}  // namespace dcov
