#pragma once

// Pinhole cameras and rigid motions.
//
// Poses are camera-from-world: P_c = R P_w + t. Twists are ordered (omega, v)
// and perturb a pose from the left, T <- exp(xi) T.
// Pixel (u, v) refers to the centre of column u, row v.

#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "dcov/errors.hpp"
#include "dcov/kernel.hpp"

namespace dcov {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat36 = Eigen::Matrix<double, 3, 6>;
using Mat26 = Eigen::Matrix<double, 2, 6>;

inline constexpr double kMinDepth = 1e-6;

inline Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
  Eigen::Matrix3d s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;

  void validate() const {
    if (!(fx > 0) || !(fy > 0) || !std::isfinite(cx) || !std::isfinite(cy)) {
      throw InvalidParameter("intrinsics need positive focal lengths");
    }
    if (width < 1 || height < 1) throw InvalidParameter("intrinsics need positive image size");
  }
  bool contains(const Eigen::Vector2d& px) const {
    return px.x() >= 0 && px.y() >= 0 && px.x() <= width - 1 && px.y() <= height - 1;
  }
  NormalizedCoord normalized(const Eigen::Vector2d& px) const {
    return pixel_to_coord(px.x(), px.y(), width, height);
  }
};

// SO(3) --------------------------------------------------------------------

inline Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Eigen::Vector3d so3_log(const Eigen::Matrix3d& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

/// Inverse of the left Jacobian of SO(3) at phi.
inline Eigen::Matrix3d so3_left_jacobian_inv(const Eigen::Vector3d& phi) {
  const double theta = phi.norm();
  const Eigen::Matrix3d s = skew(phi);
  if (theta < 1e-6) return Eigen::Matrix3d::Identity() - 0.5 * s + s * s / 12.0;
  const double c = 1.0 / (theta * theta) - (1 + std::cos(theta)) / (2 * theta * std::sin(theta));
  return Eigen::Matrix3d::Identity() - 0.5 * s + c * s * s;
}

inline Eigen::Matrix3d orthonormalize(const Eigen::Matrix3d& r) {
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1;
    out = u * svd.matrixV().transpose();
  }
  return out;
}

// SE(3) --------------------------------------------------------------------

class Pose {
 public:
  /// Compositions between re-orthonormalizations of the rotation.
  static constexpr int kReorthonormalizeEvery = 100;

  Pose() = default;
  Pose(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) : r_(r), t_(t) {}

  static Pose identity() { return {}; }
  static Pose from_quaternion(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) {
    if (!(std::abs(q.norm() - 1.0) < 1e-6)) throw InvalidParameter("pose quaternion is not unit length");
    return {q.normalized().toRotationMatrix(), t};
  }

  const Eigen::Matrix3d& rotation() const { return r_; }
  const Eigen::Vector3d& translation() const { return t_; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(r_).normalized(); }
  int compositions() const { return count_; }

  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const { return r_ * p + t_; }

  Pose operator*(const Pose& o) const {
    Pose out(r_ * o.r_, r_ * o.t_ + t_);
    out.count_ = std::max(count_, o.count_) + 1;
    if (out.count_ >= kReorthonormalizeEvery) {
      out.r_ = orthonormalize(out.r_);
      out.count_ = 0;
    }
    return out;
  }

  Pose inverse() const {
    Pose out(r_.transpose(), -(r_.transpose() * t_));
    out.count_ = count_;
    return out;
  }

  /// World-frame position of the camera centre.
  Eigen::Vector3d center() const { return -(r_.transpose() * t_); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = r_;
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

 private:
  Eigen::Matrix3d r_ = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t_ = Eigen::Vector3d::Zero();
  int count_ = 0;
};

inline Pose se3_exp(const Vec6& xi) {
  const Eigen::Vector3d w = xi.head<3>(), v = xi.tail<3>();
  const double theta = w.norm();
  const Eigen::Matrix3d s = skew(w);
  Eigen::Matrix3d vmat;
  if (theta < 1e-8) {
    vmat = Eigen::Matrix3d::Identity() + 0.5 * s + s * s / 6.0;
  } else {
    const double t2 = theta * theta;
    vmat = Eigen::Matrix3d::Identity() + (1 - std::cos(theta)) / t2 * s +
           (theta - std::sin(theta)) / (t2 * theta) * s * s;
  }
  return {so3_exp(w), vmat * v};
}

inline Vec6 se3_log(const Pose& pose) {
  const Eigen::Vector3d w = so3_log(pose.rotation());
  const double theta = w.norm();
  const Eigen::Matrix3d s = skew(w);
  Eigen::Matrix3d vinv;
  if (theta < 1e-8) {
    vinv = Eigen::Matrix3d::Identity() - 0.5 * s + s * s / 12.0;
  } else {
    const double half = 0.5 * theta;
    vinv = Eigen::Matrix3d::Identity() - 0.5 * s +
           (1 - half * std::cos(half) / std::sin(half)) / (theta * theta) * s * s;
  }
  Vec6 out;
  out << w, vinv * pose.translation();
  return out;
}

/// exp(delta) * pose
inline Pose perturb(const Pose& pose, const Vec6& delta) { return se3_exp(delta) * pose; }

/// d(exp(delta) P_c)/d(delta) at delta = 0.
inline Mat36 point_jacobian_left(const Eigen::Vector3d& pc) {
  Mat36 j;
  j.leftCols<3>() = -skew(pc);
  j.rightCols<3>() = Eigen::Matrix3d::Identity();
  return j;
}

// Camera model ---------------------------------------------------------------

inline Eigen::Vector2d project_camera(const Eigen::Vector3d& pc, const Intrinsics& k) {
  if (!(pc.z() > kMinDepth)) throw CheiralityError("point at or behind the camera");
  return {k.fx * pc.x() / pc.z() + k.cx, k.fy * pc.y() / pc.z() + k.cy};
}

/// d pixel / d camera point
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Eigen::Vector3d& pc, const Intrinsics& k) {
  const double iz = 1.0 / pc.z();
  Eigen::Matrix<double, 2, 3> j;
  j << k.fx * iz, 0, -k.fx * pc.x() * iz * iz, 0, k.fy * iz, -k.fy * pc.y() * iz * iz;
  return j;
}

inline Eigen::Vector2d project(const Pose& pose, const Eigen::Vector3d& p_world, const Intrinsics& k) {
  return project_camera(pose * p_world, k);
}

inline Eigen::Vector3d backproject(const Eigen::Vector2d& px, double depth, const Intrinsics& k) {
  if (!(depth > 0) || !std::isfinite(depth)) throw DomainError("backprojection needs positive depth");
  return {(px.x() - k.cx) / k.fx * depth, (px.y() - k.cy) / k.fy * depth, depth};
}

/// T_j T_i^-1: maps frame-i camera points to frame-j camera points.
inline Pose relative_pose(const Pose& ti, const Pose& tj) { return tj * ti.inverse(); }

enum class WarpStatus { Ok, OutOfImage, BehindCamera };

struct WarpResult {
  Eigen::Vector2d pixel = Eigen::Vector2d::Zero();
  /// Point in frame i and in frame j (camera coordinates).
  Eigen::Vector3d point_i = Eigen::Vector3d::Zero();
  Eigen::Vector3d point_j = Eigen::Vector3d::Zero();
  WarpStatus status = WarpStatus::Ok;
};

/// Warps pixel `px` of frame i with log-depth `log_depth` into frame j.
/// Never throws on geometry; the status flags cheirality and bounds.
inline WarpResult warp_checked(const Eigen::Vector2d& px, const Pose& ti, const Pose& tj,
                               double log_depth, const Intrinsics& k) {
  WarpResult out;
  const double depth = std::exp(log_depth);
  out.point_i = backproject(px, depth, k);
  if (ti.rotation() == tj.rotation() && ti.translation() == tj.translation()) {
    // Same camera: exact identity rather than a round trip through division.
    out.point_j = out.point_i;
    out.pixel = px;
    out.status = k.contains(px) ? WarpStatus::Ok : WarpStatus::OutOfImage;
    return out;
  }
  out.point_j = relative_pose(ti, tj) * out.point_i;
  if (!(out.point_j.z() > kMinDepth)) {
    out.status = WarpStatus::BehindCamera;
    return out;
  }
  out.pixel = project_camera(out.point_j, k);
  out.status = k.contains(out.pixel) ? WarpStatus::Ok : WarpStatus::OutOfImage;
  return out;
}

/// As warp_checked, but cheirality failures throw. Out-of-image results are
/// returned with their status set.
inline WarpResult warp(const Eigen::Vector2d& px, const Pose& ti, const Pose& tj, double log_depth,
                       const Intrinsics& k) {
  WarpResult r = warp_checked(px, ti, tj, log_depth, k);
  if (r.status == WarpStatus::BehindCamera) throw CheiralityError("warped point behind camera");
  return r;
}

}  // namespace dcov
