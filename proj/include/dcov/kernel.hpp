#pragma once

// Nonstationary Matérn covariance over normalized image coordinates.
//
// Every pixel of a KernelField carries three raw channels (c1, c2, c3) that
// decode to a 2x2 SPD kernel matrix
//
//     [ e^c1                  tanh(c3) sqrt(e^c1 e^c2) ]
//     [ tanh(c3) sqrt(e^c1 e^c2)                  e^c2 ]
//
// and the covariance between two coordinates is
//
//     k = sigma_f^2 |Si|^1/4 |Sj|^1/4 / |Si + Sj|^1/2 * R(sqrt(q)),
//     q = (xi - xj)^T (Si + Sj)^-1 (xi - xj).
//
// The prefactor uses |Si + Sj| (not the averaged matrix), so k(x, x) equals
// sigma_f^2 / 2 for every x.
//
// Raster convention: row 0 of a field is the top of the image (v = -1) and
// column 0 is the left edge (u = -1). Pixel centers sit at half-pixel offsets:
//     px = (u + 1) * width / 2 - 0.5,   py = (v + 1) * height / 2 - 0.5.
// Bilinear lookups clamp to the outermost pixel centers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dcov/errors.hpp"
#include "dcov/parallel.hpp"

namespace dcov {

struct NormalizedCoord {
  double u = 0.0;
  double v = 0.0;
};

inline bool is_valid_coord(const NormalizedCoord& x) {
  return std::isfinite(x.u) && std::isfinite(x.v) && x.u >= -1.0 && x.u <= 1.0 && x.v >= -1.0 &&
         x.v <= 1.0;
}

inline void validate_coord(const NormalizedCoord& x) {
  if (!is_valid_coord(x)) {
    throw DomainError("normalized coordinate (" + std::to_string(x.u) + ", " + std::to_string(x.v) +
                      ") outside [-1,1]^2");
  }
}

/// Pixel index coordinate (center of pixel 0 is 0.0) to normalized coordinate.
inline double pixel_to_normalized(double pixel, int extent) {
  return 2.0 * (pixel + 0.5) / static_cast<double>(extent) - 1.0;
}

inline double normalized_to_pixel(double normalized, int extent) {
  return (normalized + 1.0) * static_cast<double>(extent) / 2.0 - 0.5;
}

inline NormalizedCoord pixel_to_coord(double px, double py, int width, int height) {
  return {pixel_to_normalized(px, width), pixel_to_normalized(py, height)};
}

using RawKernelParams = std::array<double, 3>;

struct KernelMatrix2 {
  double a = 1.0;  // (0,0)
  double b = 1.0;  // (1,1)
  double c = 0.0;  // off-diagonal

  double det() const { return a * b - c * c; }
};

enum class Smoothness { Half, ThreeHalves, FiveHalves };

inline Smoothness smoothness_from_nu(double nu) {
  if (nu == 0.5) return Smoothness::Half;
  if (nu == 1.5) return Smoothness::ThreeHalves;
  if (nu == 2.5) return Smoothness::FiveHalves;
  throw ConfigError("unsupported Matern smoothness nu = " + std::to_string(nu) +
                    " (expected 0.5, 1.5 or 2.5)");
}

inline double nu_value(Smoothness s) {
  switch (s) {
    case Smoothness::Half: return 0.5;
    case Smoothness::ThreeHalves: return 1.5;
    case Smoothness::FiveHalves: return 2.5;
  }
  return 2.5;
}

struct GPHyperparams {
  double sigma_f_sq = 1.0;
  double sigma_n_sq = 1e-2;
  Smoothness nu = Smoothness::FiveHalves;

  void validate() const {
    if (!(std::isfinite(sigma_f_sq) && sigma_f_sq > 0.0)) {
      throw InvalidParameter("sigma_f_sq must be finite and positive");
    }
    if (!(std::isfinite(sigma_n_sq) && sigma_n_sq > 0.0)) {
      throw InvalidParameter("sigma_n_sq must be finite and positive");
    }
  }
};

/// |c3| is saturated here so that 1 - tanh^2(c3) stays representable and the
/// decoded matrix remains strictly positive definite in double precision.
inline constexpr double kMaxCorrelationRaw = 15.0;

inline KernelMatrix2 decode_kernel_matrix(const RawKernelParams& raw) {
  for (double r : raw) {
    if (!std::isfinite(r)) throw InvalidParameter("non-finite raw kernel parameter");
  }
  const double a = std::exp(raw[0]);
  const double b = std::exp(raw[1]);
  const double c3 = std::clamp(raw[2], -kMaxCorrelationRaw, kMaxCorrelationRaw);
  return {a, b, std::tanh(c3) * std::sqrt(a * b)};
}

/// Matérn correlation R(r) for the closed-form smoothness values.
inline double matern(double r, Smoothness nu) {
  if (!(r >= 0.0)) throw DomainError("matern distance must be non-negative");
  switch (nu) {
    case Smoothness::Half:
      return std::exp(-r);
    case Smoothness::ThreeHalves: {
      const double s = std::sqrt(3.0) * r;
      return (1.0 + s) * std::exp(-s);
    }
    case Smoothness::FiveHalves: {
      const double s = std::sqrt(5.0) * r;
      return (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
  }
  throw ConfigError("unsupported Matern smoothness");
}

/// dR/dq where r = sqrt(q). For nu = 1/2 the derivative is singular at r = 0;
/// zero is returned there because dq vanishes at coincident inputs.
inline double matern_dq(double r, Smoothness nu) {
  switch (nu) {
    case Smoothness::Half:
      return r > 0.0 ? -std::exp(-r) / (2.0 * r) : 0.0;
    case Smoothness::ThreeHalves:
      return -1.5 * std::exp(-std::sqrt(3.0) * r);
    case Smoothness::FiveHalves: {
      const double s = std::sqrt(5.0) * r;
      return -(5.0 / 6.0) * (1.0 + s) * std::exp(-s);
    }
  }
  throw ConfigError("unsupported Matern smoothness");
}

inline double nonstationary_cov(const NormalizedCoord& xi, const KernelMatrix2& si,
                                const NormalizedCoord& xj, const KernelMatrix2& sj,
                                const GPHyperparams& hyper) {
  const double sa = si.a + sj.a;
  const double sb = si.b + sj.b;
  const double sc = si.c + sj.c;
  const double det_sum = sa * sb - sc * sc;
  const double det_i = si.det();
  const double det_j = sj.det();
  if (!(det_sum > 0.0) || !(det_i > 0.0) || !(det_j > 0.0)) {
    throw NumericalError("kernel matrix sum is not positive definite");
  }
  const double du = xi.u - xj.u;
  const double dv = xi.v - xj.v;
  // q written so that exchanging (i, j) flips both du and dv: bitwise symmetric.
  const double q = std::max(0.0, (sb * du * du - 2.0 * sc * du * dv + sa * dv * dv) / det_sum);
  const double prefactor = std::sqrt(std::sqrt(det_i * det_j) / det_sum);
  return hyper.sigma_f_sq * prefactor * matern(std::sqrt(q), hyper.nu);
}

/// Covariance value together with its derivatives with respect to the raw
/// parameters of both endpoints. d/d(sigma_f^2) is value / sigma_f^2.
struct CovarianceGradient {
  double value = 0.0;
  RawKernelParams d_raw_i{};
  RawKernelParams d_raw_j{};
};

namespace detail {

// d/d(a, b, c) of a decoded matrix mapped back to (c1, c2, c3).
inline RawKernelParams chain_to_raw(const RawKernelParams& raw, const KernelMatrix2& s,
                                    double d_a, double d_b, double d_c) {
  const double t = std::tanh(raw[2]);
  const bool saturated = std::abs(raw[2]) > kMaxCorrelationRaw;
  const double dc_dc3 = saturated ? 0.0 : (1.0 - t * t) * std::sqrt(s.a * s.b);
  return {s.a * d_a + 0.5 * s.c * d_c, s.b * d_b + 0.5 * s.c * d_c, dc_dc3 * d_c};
}

}  // namespace detail

inline CovarianceGradient nonstationary_cov_grad(const NormalizedCoord& xi,
                                                 const RawKernelParams& raw_i,
                                                 const NormalizedCoord& xj,
                                                 const RawKernelParams& raw_j,
                                                 const GPHyperparams& hyper) {
  const KernelMatrix2 si = decode_kernel_matrix(raw_i);
  const KernelMatrix2 sj = decode_kernel_matrix(raw_j);
  const double sa = si.a + sj.a;
  const double sb = si.b + sj.b;
  const double sc = si.c + sj.c;
  const double det_sum = sa * sb - sc * sc;
  const double det_i = si.det();
  const double det_j = sj.det();
  if (!(det_sum > 0.0) || !(det_i > 0.0) || !(det_j > 0.0)) {
    throw NumericalError("kernel matrix sum is not positive definite");
  }
  const double du = xi.u - xj.u;
  const double dv = xi.v - xj.v;
  const double q = std::max(0.0, (sb * du * du - 2.0 * sc * du * dv + sa * dv * dv) / det_sum);
  const double r = std::sqrt(q);
  const double prefactor = std::sqrt(std::sqrt(det_i * det_j) / det_sum);
  const double corr = matern(r, hyper.nu);

  CovarianceGradient out;
  out.value = hyper.sigma_f_sq * prefactor * corr;

  // w = S^-1 d; dq/dS = -w w^T, with the off-diagonal counted twice.
  const double w0 = (sb * du - sc * dv) / det_sum;
  const double w1 = (-sc * du + sa * dv) / det_sum;
  const double dq_da = -w0 * w0;
  const double dq_db = -w1 * w1;
  const double dq_dc = -2.0 * w0 * w1;
  const double dk_dq = hyper.sigma_f_sq * prefactor * matern_dq(r, hyper.nu);

  const double dlogsum_da = sb / det_sum;
  const double dlogsum_db = sa / det_sum;
  const double dlogsum_dc = -2.0 * sc / det_sum;

  auto endpoint = [&](const KernelMatrix2& s, double det_s, const RawKernelParams& raw) {
    const double dlogp_da = 0.25 * s.b / det_s - 0.5 * dlogsum_da;
    const double dlogp_db = 0.25 * s.a / det_s - 0.5 * dlogsum_db;
    const double dlogp_dc = -0.5 * s.c / det_s - 0.5 * dlogsum_dc;
    const double d_a = out.value * dlogp_da + dk_dq * dq_da;
    const double d_b = out.value * dlogp_db + dk_dq * dq_db;
    const double d_c = out.value * dlogp_dc + dk_dq * dq_dc;
    return detail::chain_to_raw(raw, s, d_a, d_b, d_c);
  };
  out.d_raw_i = endpoint(si, det_i, raw_i);
  out.d_raw_j = endpoint(sj, det_j, raw_j);
  return out;
}

/// Per-pixel raster of raw kernel parameters, stored row-major with three
/// interleaved channels.
class KernelField {
 public:
  KernelField() = default;
  KernelField(int width, int height) : width_(width), height_(height) {
    if (width < 1 || height < 1) throw DomainError("kernel field dimensions must be positive");
    data_.assign(static_cast<std::size_t>(width) * height * 3, 0.0);
  }

  static KernelField constant(int width, int height, const RawKernelParams& raw) {
    KernelField f(width, height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) f.set(x, y, raw);
    return f;
  }

  /// Isotropic field with lengthscale-like parameter ell: Sigma = ell^2 I.
  static KernelField isotropic(int width, int height, double ell) {
    const double c = 2.0 * std::log(ell);
    return constant(width, height, {c, c, 0.0});
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  RawKernelParams at(int x, int y) const {
    const std::size_t o = offset(x, y);
    return {data_[o], data_[o + 1], data_[o + 2]};
  }
  void set(int x, int y, const RawKernelParams& raw) {
    const std::size_t o = offset(x, y);
    data_[o] = raw[0];
    data_[o + 1] = raw[1];
    data_[o + 2] = raw[2];
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  /// Throws InvalidParameter if any raw value is non-finite.
  void validate() const {
    for (double v : data_) {
      if (!std::isfinite(v)) throw InvalidParameter("kernel field contains non-finite values");
    }
  }

 private:
  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * width_ + x) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

/// Four raster taps and weights of a bilinear lookup. Taps are pixel indices
/// (y * width + x); weights sum to one.
struct BilinearTaps {
  std::array<std::size_t, 4> index{};
  std::array<double, 4> weight{};
};

namespace detail {
inline void axis_taps(double p, int extent, int& i0, int& i1, double& t) {
  if (extent == 1) {
    i0 = i1 = 0;
    t = 0.0;
    return;
  }
  p = std::clamp(p, 0.0, static_cast<double>(extent - 1));
  i0 = std::min(static_cast<int>(std::floor(p)), extent - 2);
  i1 = i0 + 1;
  t = p - i0;
}
}  // namespace detail

inline BilinearTaps bilinear_taps(int width, int height, const NormalizedCoord& x) {
  validate_coord(x);
  int x0, x1, y0, y1;
  double tx, ty;
  detail::axis_taps(normalized_to_pixel(x.u, width), width, x0, x1, tx);
  detail::axis_taps(normalized_to_pixel(x.v, height), height, y0, y1, ty);
  const auto w = static_cast<std::size_t>(width);
  BilinearTaps taps;
  taps.index = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
  taps.weight = {(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty};
  return taps;
}

/// Bilinear interpolation of the raw channels at a normalized coordinate.
inline RawKernelParams sample_field(const KernelField& field, const NormalizedCoord& x) {
  const BilinearTaps taps = bilinear_taps(field.width(), field.height(), x);
  RawKernelParams out{0.0, 0.0, 0.0};
  const auto& d = field.data();
  for (int k = 0; k < 4; ++k) {
    for (int c = 0; c < 3; ++c) out[c] += taps.weight[k] * d[taps.index[k] * 3 + c];
  }
  return out;
}

/// Coordinate with its interpolated raw parameters and decoded kernel matrix.
struct KernelPoint {
  NormalizedCoord x;
  RawKernelParams raw;
  KernelMatrix2 sigma;
};

inline std::vector<KernelPoint> prepare_points(const std::vector<NormalizedCoord>& coords,
                                               const KernelField& field) {
  std::vector<KernelPoint> pts(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    pts[i].x = coords[i];
    pts[i].raw = sample_field(field, coords[i]);
    pts[i].sigma = decode_kernel_matrix(pts[i].raw);
  }
  return pts;
}

inline double point_cov(const KernelPoint& p, const KernelPoint& q, const GPHyperparams& hyper) {
  return nonstationary_cov(p.x, p.sigma, q.x, q.sigma, hyper);
}

/// Cross-covariance matrix with rows indexed by `rows` and columns by `cols`.
inline Eigen::MatrixXd cross_cov(const std::vector<KernelPoint>& rows,
                                 const std::vector<KernelPoint>& cols,
                                 const GPHyperparams& hyper) {
  Eigen::MatrixXd k(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  parallel_for(cols.size(), [&](std::size_t j) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = point_cov(rows[i], cols[j], hyper);
    }
  });
  return k;
}

/// Symmetric covariance matrix over a point set. The upper triangle is
/// computed and mirrored so symmetry is exact.
inline Eigen::MatrixXd cov_matrix(const std::vector<KernelPoint>& pts, const GPHyperparams& hyper) {
  const auto n = static_cast<Eigen::Index>(pts.size());
  Eigen::MatrixXd k(n, n);
  parallel_for(pts.size(), [&](std::size_t jj) {
    const auto j = static_cast<Eigen::Index>(jj);
    for (Eigen::Index i = 0; i <= j; ++i) k(i, j) = point_cov(pts[i], pts[jj], hyper);
  });
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < j; ++i) k(j, i) = k(i, j);
  return k;
}

inline Eigen::MatrixXd build_cov_matrix(const std::vector<NormalizedCoord>& coords,
                                        const KernelField& field, const GPHyperparams& hyper) {
  if (coords.empty()) throw DomainError("build_cov_matrix requires at least one coordinate");
  hyper.validate();
  return cov_matrix(prepare_points(coords, field), hyper);
}

inline Eigen::MatrixXd build_cross_cov(const std::vector<NormalizedCoord>& rows,
                                       const std::vector<NormalizedCoord>& cols,
                                       const KernelField& field, const GPHyperparams& hyper) {
  hyper.validate();
  return cross_cov(prepare_points(rows, field), prepare_points(cols, field), hyper);
}

/// Normalized coordinates of every pixel center of a width x height raster at
/// the given stride, in row-major order.
inline std::vector<NormalizedCoord> grid_coords(int width, int height, int stride = 1) {
  if (stride < 1) throw DomainError("grid stride must be >= 1");
  std::vector<NormalizedCoord> out;
  for (int y = 0; y < height; y += stride)
    for (int x = 0; x < width; x += stride) out.push_back(pixel_to_coord(x, y, width, height));
  return out;
}

}  // namespace dcov
