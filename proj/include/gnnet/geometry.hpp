#pragma once

// Rigid-body motion on SE(3), the pinhole model with inverse depth, and the
// analytic derivative of a projected pixel with respect to a pose increment.
//
// Conventions:
//  * A twist is ordered [v; w] (translation part first, rotation part last).
//  * Pose increments are left-multiplied: T <- exp(delta) * T.
//  * Pixel (i, j) has its center at image coordinates (i, j).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "gnnet/error.hpp"

namespace gnnet {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat26 = Eigen::Matrix<double, 2, 6>;

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  // clang-format off
  m <<   0.0, -w.z(),  w.y(),
       w.z(),    0.0, -w.x(),
      -w.y(),  w.x(),    0.0;
  // clang-format on
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

/// Rigid transform x -> R x + t.
struct SE3Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SE3Pose identity() { return {}; }

  static SE3Pose from_matrix(const Mat4& m) {
    SE3Pose p;
    p.rotation = m.topLeftCorner<3, 3>();
    p.translation = m.topRightCorner<3, 1>();
    return p;
  }

  [[nodiscard]] Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  [[nodiscard]] Vec3 operator*(const Vec3& x) const { return rotation * x + translation; }

  [[nodiscard]] SE3Pose operator*(const SE3Pose& other) const {
    SE3Pose p;
    p.rotation = rotation * other.rotation;
    p.translation = rotation * other.translation + translation;
    return p;
  }

  [[nodiscard]] SE3Pose inverse() const {
    SE3Pose p;
    p.rotation = rotation.transpose();
    p.translation = -(p.rotation * translation);
    return p;
  }

  [[nodiscard]] bool is_finite() const {
    return rotation.allFinite() && translation.allFinite();
  }
};

inline SE3Pose se3_exp(const Vec6& twist) {
  const Vec3 v = twist.head<3>();
  const Vec3 w = twist.tail<3>();
  const double theta_sq = w.squaredNorm();
  const double theta = std::sqrt(theta_sq);
  const Mat3 W = hat(w);
  const Mat3 W2 = W * W;

  double a, b, c;  // R = I + aW + bW^2, V = I + bW + cW^2
  if (theta < 1e-8) {
    a = 1.0 - theta_sq / 6.0;
    b = 0.5 - theta_sq / 24.0;
    c = 1.0 / 6.0 - theta_sq / 120.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta_sq;
    c = (theta - std::sin(theta)) / (theta_sq * theta);
  }
  SE3Pose p;
  p.rotation = Mat3::Identity() + a * W + b * W2;
  p.translation = (Mat3::Identity() + b * W + c * W2) * v;
  return p;
}

/// Inverse of se3_exp for rotation angles in [0, pi).
inline Vec6 se3_log(const SE3Pose& pose) {
  const Mat3& R = pose.rotation;
  Vec3 w;
  const double cos_theta = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  if (theta < 1e-8) {
    w = vee(R - R.transpose()) * 0.5;
  } else if (theta > M_PI - 1e-6) {
    const Eigen::AngleAxisd aa(R);
    w = aa.axis() * aa.angle();
  } else {
    w = vee(R - R.transpose()) * (theta / (2.0 * std::sin(theta)));
  }

  const double t = w.norm();
  const Mat3 W = hat(w);
  Mat3 V_inv;
  if (t < 1e-8) {
    V_inv = Mat3::Identity() - 0.5 * W + (1.0 / 12.0) * W * W;
  } else {
    const double k = (1.0 - (t * std::sin(t)) / (2.0 * (1.0 - std::cos(t)))) / (t * t);
    V_inv = Mat3::Identity() - 0.5 * W + k * W * W;
  }
  Vec6 out;
  out.head<3>() = V_inv * pose.translation;
  out.tail<3>() = w;
  return out;
}

/// Pinhole camera without distortion.
struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0) || width <= 0 || height <= 0 || !(cx >= 0.0 && cx < width) ||
        !(cy >= 0.0 && cy < height)) {
      std::ostringstream os;
      os << "invalid intrinsics fx=" << fx << " fy=" << fy << " cx=" << cx << " cy=" << cy
         << " size=" << width << "x" << height;
      throw ConfigError(os.str());
    }
  }

  /// Intrinsics of pyramid level `level` (coordinates divided by 2^level).
  [[nodiscard]] CameraIntrinsics at_level(int level) const {
    const double s = 1.0 / static_cast<double>(1 << level);
    return {fx * s, fy * s, cx * s, cy * s, width >> level, height >> level};
  }

  [[nodiscard]] Vec3 unproject(const Vec2& pixel, double depth) const {
    return {(pixel.x() - cx) / fx * depth, (pixel.y() - cy) / fy * depth, depth};
  }

  [[nodiscard]] Vec2 project(const Vec3& x) const {
    return {fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy};
  }

  [[nodiscard]] bool in_view(const Vec2& pixel, double border) const {
    return pixel.x() >= border && pixel.y() >= border && pixel.x() <= width - 1 - border &&
           pixel.y() <= height - 1 - border;
  }
};

/// A reference pixel with known inverse depth.
struct PointWithDepth {
  Vec2 pixel = Vec2::Zero();
  double inverse_depth = 1.0;
};

inline constexpr double kDefaultBorder = 2.0;

/// The reference point expressed in the target camera frame.
inline Vec3 transform_point(const PointWithDepth& point, const SE3Pose& pose,
                            const CameraIntrinsics& intr_src) {
  if (!(point.inverse_depth > 0.0)) throw DomainError("transform_point: inverse depth must be > 0");
  return pose * intr_src.unproject(point.pixel, 1.0 / point.inverse_depth);
}

/// Projects a reference point into the target view. Returns nullopt when the
/// transformed point is behind the camera or lands inside the border margin.
inline std::optional<Vec2> project(const PointWithDepth& point, const SE3Pose& pose,
                                   const CameraIntrinsics& intr_src,
                                   const CameraIntrinsics& intr_dst,
                                   double border = kDefaultBorder) {
  const Vec3 y = transform_point(point, pose, intr_src);
  if (!(y.z() > 0.0)) return std::nullopt;
  Vec2 p = intr_dst.project(y);
  if (!p.allFinite() || !intr_dst.in_view(p, border)) return std::nullopt;
  return p;
}

inline std::optional<Vec2> project(const PointWithDepth& point, const SE3Pose& pose,
                                   const CameraIntrinsics& intr, double border = kDefaultBorder) {
  return project(point, pose, intr, intr, border);
}

/// d(projected pixel) / d(delta) for the perturbation exp(delta) * pose.
inline Mat26 pose_jacobian(const PointWithDepth& point, const SE3Pose& pose,
                           const CameraIntrinsics& intr_src, const CameraIntrinsics& intr_dst,
                           double border = kDefaultBorder) {
  if (!project(point, pose, intr_src, intr_dst, border)) {
    throw DomainError("pose_jacobian: point does not project into view");
  }
  const Vec3 y = transform_point(point, pose, intr_src);
  const double iz = 1.0 / y.z();
  Eigen::Matrix<double, 2, 3> dp_dy;
  // clang-format off
  dp_dy << intr_dst.fx * iz, 0.0, -intr_dst.fx * y.x() * iz * iz,
           0.0, intr_dst.fy * iz, -intr_dst.fy * y.y() * iz * iz;
  // clang-format on
  Eigen::Matrix<double, 3, 6> dy_dxi;
  dy_dxi.leftCols<3>() = Mat3::Identity();
  dy_dxi.rightCols<3>() = -hat(y);
  return dp_dy * dy_dxi;
}

inline Mat26 pose_jacobian(const PointWithDepth& point, const SE3Pose& pose,
                           const CameraIntrinsics& intr, double border = kDefaultBorder) {
  return pose_jacobian(point, pose, intr, intr, border);
}

}  // namespace gnnet
