#pragma once

// Shared helpers for the test binaries.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gnnet/geometry.hpp"
#include "gnnet/tensor.hpp"

namespace gnnet::test {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline Vec6 random_twist(std::mt19937_64& rng, double max_translation, double max_rotation) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec6 v;
  for (int i = 0; i < 3; ++i) v[i] = u(rng) * max_translation;
  Vec3 w(u(rng), u(rng), u(rng));
  if (w.norm() > 1e-12) w = w.normalized() * (std::abs(u(rng)) * max_rotation);
  v.tail<3>() = w;
  return v;
}

inline PointWithDepth random_point(std::mt19937_64& rng, const CameraIntrinsics& cam,
                                   double min_inv_depth, double max_inv_depth) {
  std::uniform_real_distribution<double> ux(4.0, cam.width - 5.0);
  std::uniform_real_distribution<double> uy(4.0, cam.height - 5.0);
  std::uniform_real_distribution<double> ud(min_inv_depth, max_inv_depth);
  return {{ux(rng), uy(rng)}, ud(rng)};
}

inline tensor::Tensor random_tensor(std::mt19937_64& rng, tensor::Shape shape, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  tensor::Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Textured plane Z = z0 + ax X + ay Y in the reference camera frame.
struct PlaneScene {
  double z0 = 2.0, ax = 0.1, ay = -0.05;
  std::size_t channels = 1;

  // Smooth texture, channel c, at plane coordinates (X, Y).
  double texture(std::size_t c, double X, double Y) const {
    const double k = 1.0 + 0.37 * static_cast<double>(c);
    return 128.0 + 55.0 * std::sin(3.1 * k * X + 1.0 + c) * std::cos(2.3 * Y - 0.5 * c) +
           35.0 * std::sin(4.7 * X - 3.3 * k * Y + 0.4);
  }

  /// Depth (reference frame Z) of the plane along the reference ray through `pixel`.
  double depth(const CameraIntrinsics& cam, const Vec2& pixel) const {
    const Vec3 d = cam.unproject(pixel, 1.0);
    return z0 / (1.0 - ax * d.x() - ay * d.y());
  }

  /// Image seen by a camera with pose T_tgt_ref (reference to target).
  tensor::Tensor render(const CameraIntrinsics& cam, const SE3Pose& T_tgt_ref) const {
    const SE3Pose T = T_tgt_ref.inverse();  // target to reference
    tensor::Tensor img({channels, static_cast<std::size_t>(cam.height), static_cast<std::size_t>(cam.width)});
    for (int y = 0; y < cam.height; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        const Vec3 d = T.rotation * cam.unproject(Vec2(x, y), 1.0);
        const Vec3& o = T.translation;
        // (o + s d).z = z0 + ax (o + s d).x + ay (o + s d).y
        const double s = (z0 + ax * o.x() + ay * o.y() - o.z()) / (d.z() - ax * d.x() - ay * d.y());
        const Vec3 X = o + s * d;
        for (std::size_t c = 0; c < channels; ++c) {
          img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = texture(c, X.x(), X.y());
        }
      }
    }
    return img;
  }
};

inline std::vector<PointWithDepth> plane_points(const PlaneScene& scene, const CameraIntrinsics& cam,
                                                int step, int border) {
  std::vector<PointWithDepth> pts;
  for (int y = border; y < cam.height - border; y += step) {
    for (int x = border; x < cam.width - border; x += step) {
      pts.push_back({Vec2(x, y), 1.0 / scene.depth(cam, Vec2(x, y))});
    }
  }
  return pts;
}

}  // namespace gnnet::test
