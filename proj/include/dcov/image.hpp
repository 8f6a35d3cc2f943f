#pragma once

// Single-channel float rasters: bilinear sampling with analytic gradient,
// box-filter pyramid and gradient magnitude.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "dcov/errors.hpp"

namespace dcov {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h) {
    if (w < 1 || h < 1) throw DomainError("image dimensions must be positive");
    data.assign(static_cast<std::size_t>(w) * h, fill);
  }

  double& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return data.size(); }

  void validate() const {
    if (data.size() != static_cast<std::size_t>(width) * height) throw DomainError("image storage mismatch");
    for (double v : data) {
      if (!std::isfinite(v)) throw DomainError("image contains non-finite values");
    }
  }
};

struct ImageSample {
  double value = 0.0;
  /// d value / d (x, y)
  Eigen::Vector2d gradient = Eigen::Vector2d::Zero();
};

/// True when (x, y) lies in [0, w-1] x [0, h-1].
inline bool in_bounds(const Image& img, double x, double y) {
  return x >= 0 && y >= 0 && x <= img.width - 1 && y <= img.height - 1;
}

/// Bilinear sample at pixel coordinates (x, y) in [0, w-1] x [0, h-1].
/// The gradient is that of the bilinear patch containing the sample; on the
/// last row or column the patch to the left / above is used.
inline ImageSample sample_bilinear(const Image& img, double x, double y) {
  if (!in_bounds(img, x, y)) throw DomainError("image sample outside the raster");
  const int x0 = std::min(static_cast<int>(std::floor(x)), std::max(img.width - 2, 0));
  const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(img.height - 2, 0));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double tx = x - x0, ty = y - y0;
  const double a = img.at(x0, y0), b = img.at(x1, y0), c = img.at(x0, y1), d = img.at(x1, y1);
  ImageSample s;
  s.value = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
  s.gradient.x() = x1 > x0 ? (1 - ty) * (b - a) + ty * (d - c) : 0.0;
  s.gradient.y() = y1 > y0 ? (1 - tx) * (c - a) + tx * (d - b) : 0.0;
  return s;
}

/// 2x2 box-filter downsampling; odd trailing rows/columns are dropped.
inline Image downsample(const Image& img) {
  const int w = std::max(img.width / 2, 1), h = std::max(img.height / 2, 1);
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xa = std::min(2 * x, img.width - 1), xb = std::min(2 * x + 1, img.width - 1);
      const int ya = std::min(2 * y, img.height - 1), yb = std::min(2 * y + 1, img.height - 1);
      out.at(x, y) = 0.25 * (img.at(xa, ya) + img.at(xb, ya) + img.at(xa, yb) + img.at(xb, yb));
    }
  return out;
}

/// Central-difference gradient magnitude (one-sided at the border).
inline Image gradient_magnitude(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int xl = std::max(x - 1, 0), xr = std::min(x + 1, img.width - 1);
      const int yu = std::max(y - 1, 0), yd = std::min(y + 1, img.height - 1);
      const double gx = xr > xl ? (img.at(xr, y) - img.at(xl, y)) / (xr - xl) : 0.0;
      const double gy = yd > yu ? (img.at(x, yd) - img.at(x, yu)) / (yd - yu) : 0.0;
      out.at(x, y) = std::hypot(gx, gy);
    }
  return out;
}

}  // namespace dcov
