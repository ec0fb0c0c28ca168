#pragma once

// Plain (untaped) sampling of dense D-channel maps, shared by the runtime
// solvers. The arithmetic matches tensor::bilinear_sample exactly, and the
// spatial derivative is the same central difference (h = 1 px) the training
// loss differentiates through.

#include <Eigen/Core>

#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/geometry.hpp"
#include "gnnet/tensor.hpp"

namespace gnnet {

/// (D, H, W) descriptor grid.
using FeatureMap = tensor::Tensor;

struct FeaturePyramid {
  std::vector<FeatureMap> levels;  // level l has extent (H / 2^l, W / 2^l)

  [[nodiscard]] std::size_t size() const { return levels.size(); }
  [[nodiscard]] const FeatureMap& operator[](std::size_t l) const { return levels.at(l); }
};

inline std::size_t map_channels(const FeatureMap& m) { return m.dim(0); }
inline std::size_t map_height(const FeatureMap& m) { return m.dim(1); }
inline std::size_t map_width(const FeatureMap& m) { return m.dim(2); }

/// True when x lies in [border, W-1-border] x [border, H-1-border].
inline bool in_sampling_region(const FeatureMap& m, const Vec2& x, double border) {
  return x.x() >= border && x.y() >= border && x.x() <= map_width(m) - 1.0 - border &&
         x.y() <= map_height(m) - 1.0 - border;
}

/// Bilinear sample of every channel at x. x must satisfy in_sampling_region(m, x, 0).
inline Eigen::VectorXd sample(const FeatureMap& m, const Vec2& x) {
  if (!in_sampling_region(m, x, 0.0)) throw DomainError("sample: position outside map");
  const std::size_t C = map_channels(m), H = map_height(m), W = map_width(m);
  const auto [x0, fx] = tensor::detail::bilinear_cell(x.x(), W);
  const auto [y0, fy] = tensor::detail::bilinear_cell(x.y(), H);
  Eigen::VectorXd out(static_cast<Eigen::Index>(C));
  for (std::size_t c = 0; c < C; ++c) {
    out[static_cast<Eigen::Index>(c)] =
        tensor::detail::bilinear_blend(m.ptr() + (c * H + y0) * W + x0, W, fx, fy);
  }
  return out;
}

/// Central-difference derivative dF/dx (D x 2) at x, stencil half-width 1 px.
/// Requires in_sampling_region(m, x, 1).
inline Eigen::MatrixX2d sample_gradient(const FeatureMap& m, const Vec2& x) {
  if (!in_sampling_region(m, x, 1.0)) throw DomainError("sample_gradient: stencil outside map");
  Eigen::MatrixX2d J(static_cast<Eigen::Index>(map_channels(m)), 2);
  J.col(0) = (sample(m, x + Vec2(1.0, 0.0)) - sample(m, x - Vec2(1.0, 0.0))) * 0.5;
  J.col(1) = (sample(m, x + Vec2(0.0, 1.0)) - sample(m, x - Vec2(0.0, 1.0))) * 0.5;
  return J;
}

/// 2x2 mean pooling of a (C, H, W) map.
inline FeatureMap downsample2(const FeatureMap& m) {
  const std::size_t C = map_channels(m), H = map_height(m), W = map_width(m);
  if (H % 2 || W % 2) throw ShapeError("downsample2: odd map size");
  FeatureMap out({C, H / 2, W / 2});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H / 2; ++i)
      for (std::size_t j = 0; j < W / 2; ++j)
        out.at(c, i, j) = 0.25 * (m.at(c, 2 * i, 2 * j) + m.at(c, 2 * i, 2 * j + 1) +
                                  m.at(c, 2 * i + 1, 2 * j) + m.at(c, 2 * i + 1, 2 * j + 1));
  return out;
}

/// Mean-pooled pyramid of an image-like map (the raw-intensity "features").
inline FeaturePyramid image_pyramid(const FeatureMap& image, int levels) {
  FeaturePyramid p;
  p.levels.push_back(image);
  for (int l = 1; l < levels; ++l) p.levels.push_back(downsample2(p.levels.back()));
  return p;
}

}  // namespace gnnet
