#pragma once

// Ground-truth correspondences between two rendered frames.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gnnet/bench/scene.hpp"
#include "gnnet/error.hpp"
#include "gnnet/losses.hpp"

namespace gnnet::bench {

struct CorrespondenceConfig {
  double border = 2.0;
  double occlusion_tolerance = 0.02;  // relative depth disagreement
  double max_reprojection = 0.1;      // forward-backward, px
  double negative_min_distance = 8.0;
};

/// Bilinear depth lookup; nullopt outside the map.
inline std::optional<double> interpolate_depth(const DepthMap& d, const Vec2& p) {
  if (!(p.x() >= 0 && p.y() >= 0 && p.x() <= d.width - 1 && p.y() <= d.height - 1)) return std::nullopt;
  const int x0 = std::min(static_cast<int>(p.x()), d.width - 2);
  const int y0 = std::min(static_cast<int>(p.y()), d.height - 2);
  const double ax = p.x() - x0, ay = p.y() - y0;
  return (1 - ax) * (1 - ay) * d.at(y0, x0) + ax * (1 - ay) * d.at(y0, x0 + 1) +
         (1 - ax) * ay * d.at(y0 + 1, x0) + ax * ay * d.at(y0 + 1, x0 + 1);
}

/// Maps an integer pixel of frame a into frame b. Returns nullopt when the
/// pixel leaves the view, is occluded in b, or fails the round trip.
inline std::optional<Vec2> transfer_pixel(const Frame& a, const Frame& b, const CameraIntrinsics& intr,
                                          int x, int y, const CorrespondenceConfig& cfg = {}) {
  const double za = a.depth.at(y, x);
  const SE3Pose T_ba = a.pose.matrix() == b.pose.matrix() ? SE3Pose::identity() : b.pose.inverse() * a.pose;
  const Vec3 Xb = T_ba * intr.unproject(Vec2(x, y), za);
  if (!(Xb.z() > 0)) return std::nullopt;
  const Vec2 pb = intr.project(Xb);
  if (!pb.allFinite() || !intr.in_view(pb, cfg.border)) return std::nullopt;
  const auto zb = interpolate_depth(b.depth, pb);
  if (!zb) return std::nullopt;
  // each of the four samples must see the same surface, so that an occluder
  // edge between them cannot be averaged away
  const int x0 = std::min(static_cast<int>(pb.x()), intr.width - 2);
  const int y0 = std::min(static_cast<int>(pb.y()), intr.height - 2);
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx)
      if (std::abs(b.depth.at(y0 + dy, x0 + dx) - Xb.z()) > cfg.occlusion_tolerance * Xb.z()) return std::nullopt;
  const Vec3 Xa = T_ba.inverse() * intr.unproject(pb, *zb);
  if (!(Xa.z() > 0) || (intr.project(Xa) - Vec2(x, y)).norm() >= cfg.max_reprojection) return std::nullopt;
  return pb;
}

/// Positives at distinct random pixels of frame a plus negatives drawn away
/// from each positive's match. Throws DataError when fewer than n_pos pixels
/// have a valid match.
inline CorrespondenceBatch make_correspondences(const Frame& a, const Frame& b, const CameraIntrinsics& intr,
                                                std::size_t n_pos, std::size_t n_neg, std::uint64_t seed,
                                                const CorrespondenceConfig& cfg = {}) {
  CorrespondenceBatch batch;
  batch.frame_a = a.id;
  batch.frame_b = b.id;
  batch.inter_sequence = a.condition != b.condition;
  const int lo = static_cast<int>(std::ceil(cfg.border));
  std::vector<std::pair<int, int>> pixels;
  for (int y = lo; y < intr.height - lo; ++y)
    for (int x = lo; x < intr.width - lo; ++x) pixels.emplace_back(x, y);
  Rng rng(seed);
  std::shuffle(pixels.begin(), pixels.end(), rng);
  for (const auto& [x, y] : pixels) {
    if (batch.positives.size() == n_pos) break;
    if (auto pb = transfer_pixel(a, b, intr, x, y, cfg)) batch.positives.push_back({Vec2(x, y), *pb});
  }
  if (batch.positives.size() < n_pos) {
    throw DataError("make_correspondences: frames " + std::to_string(a.id) + " and " + std::to_string(b.id) +
                    " have " + std::to_string(batch.positives.size()) + " valid matches, need " +
                    std::to_string(n_pos));
  }
  if (n_neg > 0) {
    batch.negatives = sample_negatives(batch.positives, n_neg, intr.width, intr.height, cfg.border,
                                       cfg.negative_min_distance, rng);
  }
  return batch;
}

}  // namespace gnnet::bench
