#pragma once

// Runtime feature-metric alignment: per-pixel Gauss-Newton tracking, the
// 6-DOF pose system, and coarse-to-fine Levenberg-Marquardt pose alignment.
//
// Every system stores b = -J^T W r, so the undamped solution is delta = H^-1 b
// in both the 2-D and the 6-D case.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/feature_map.hpp"
#include "gnnet/geometry.hpp"

namespace gnnet {

template <int N>
struct GaussNewtonSystem {
  static constexpr int dim = N;
  Eigen::Matrix<double, N, N> H = Eigen::Matrix<double, N, N>::Zero();
  Eigen::Matrix<double, N, 1> b = Eigen::Matrix<double, N, 1>::Zero();
  double residual_sq_sum = 0.0;  // sum of |r|^2 over valid points
  double energy = 0.0;           // sum of w_grad * huber(|r|) over valid points
  std::size_t valid_points = 0;
  std::size_t invalid_points = 0;
  std::size_t inliers = 0;  // valid points with |r| <= huber delta

  [[nodiscard]] double mean_energy() const {
    return valid_points ? energy / static_cast<double>(valid_points) : 0.0;
  }
};

using PixelSystem = GaussNewtonSystem<2>;
using PoseSystem = GaussNewtonSystem<6>;

struct AlignmentConfig {
  int max_iterations = 50;  // per level
  double step_norm_tol = 1e-6;
  double huber_delta = 2.0;
  bool gradient_weighting = false;
  double gradient_weight_const = 50.0;
  std::vector<int> levels{2, 1, 0};  // coarse to fine
  double initial_damping = 1e-4;
  double damping_increase = 10.0;
  double damping_decrease = 0.5;
  double max_damping = 1e10;
  double border = kDefaultBorder;
  std::size_t min_points = 6;

  /// Settings for raw 0..255 intensities.
  static AlignmentConfig intensity() {
    AlignmentConfig c;
    c.huber_delta = 9.0;
    c.gradient_weighting = true;
    return c;
  }

  void validate() const {
    if (max_iterations < 1 || !(step_norm_tol > 0) || !(huber_delta > 0) ||
        !(gradient_weight_const > 0) || levels.empty() || !(initial_damping >= 0) ||
        !(damping_increase > 1) || !(damping_decrease > 0 && damping_decrease <= 1) ||
        !(max_damping > initial_damping) || border < 1.0 || min_points < 6) {
      throw ConfigError("invalid alignment config");
    }
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i] < 0 || (i > 0 && levels[i] >= levels[i - 1])) {
        throw ConfigError("alignment levels must be distinct and ordered coarse to fine");
      }
    }
  }
};

struct TrackResult {
  SE3Pose pose;
  bool converged = false;
  int iterations = 0;
  double final_residual = 0.0;  // RMS descriptor residual over valid points
  double inlier_fraction = 0.0;
  double last_step_norm = 0.0;
  bool rank_deficient = false;
  std::vector<double> energy_history;  // mean energy at each level start and accepted step
};

inline double huber_energy(double s, double delta) {
  return s <= delta ? 0.5 * s * s : delta * (s - 0.5 * delta);
}

/// IRLS weight of the Huber norm, rho'(s) / s.
inline double huber_weight(double s, double delta) { return s <= delta ? 1.0 : delta / s; }

inline double gradient_weight(const Eigen::MatrixX2d& J, const AlignmentConfig& cfg) {
  if (!cfg.gradient_weighting) return 1.0;
  const double c2 = cfg.gradient_weight_const * cfg.gradient_weight_const;
  return c2 / (c2 + J.squaredNorm());
}

/// r = F_tgt(p') - F_ref(p), or nullopt when p' is out of view.
inline std::optional<Eigen::VectorXd> residual(const FeatureMap& ref, const FeatureMap& tgt,
                                               const PointWithDepth& point, const SE3Pose& pose,
                                               const CameraIntrinsics& intr,
                                               double border = kDefaultBorder) {
  const auto p = project(point, pose, intr, border);
  if (!p || !in_sampling_region(ref, point.pixel, 0.0)) return std::nullopt;
  return Eigen::VectorXd(sample(tgt, *p) - sample(ref, point.pixel));
}

// ---------------------------------------------------------------------------
// Per-pixel tracking
// ---------------------------------------------------------------------------

struct PixelStep {
  PixelSystem system;  // H = J'^T J', b = -J'^T r (no regularizer)
  Vec2 x = Vec2::Zero();
  double step_norm = 0.0;
};

/// Unweighted 2-D system at x for target descriptor f_t. Requires the
/// central-difference stencil at x to be inside the map.
inline std::optional<PixelSystem> pixel_system(const FeatureMap& tgt, const Vec2& x,
                                               const Eigen::VectorXd& f_t) {
  if (!in_sampling_region(tgt, x, 1.0)) return std::nullopt;
  const Eigen::MatrixX2d J = sample_gradient(tgt, x);
  const Eigen::VectorXd r = sample(tgt, x) - f_t;
  PixelSystem s;
  s.H = J.transpose() * J;
  s.b = -(J.transpose() * r);
  s.residual_sq_sum = r.squaredNorm();
  s.valid_points = 1;
  return s;
}

/// One step x <- x_s + (H' + eps I)^-1 b'. The step is computed as the
/// least-squares solution of [J'; sqrt(eps) I] delta = [-r; 0] by QR, which
/// is the same vector without squaring the condition number of J'.
inline std::optional<PixelStep> pixel_gn_step(const FeatureMap& tgt, const Vec2& x_s,
                                              const Eigen::VectorXd& f_t, double epsilon) {
  if (!in_sampling_region(tgt, x_s, 1.0)) return std::nullopt;
  const Eigen::MatrixX2d J = sample_gradient(tgt, x_s);
  const Eigen::VectorXd r = sample(tgt, x_s) - f_t;
  const Eigen::Index D = J.rows();
  PixelStep out;
  out.system.H = J.transpose() * J;
  out.system.b = -(J.transpose() * r);
  out.system.residual_sq_sum = r.squaredNorm();
  out.system.valid_points = 1;

  Eigen::MatrixX2d A(D + 2, 2);
  A.topRows(D) = J;
  A.bottomRows(2) = std::sqrt(epsilon) * Mat2::Identity();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(D + 2);
  rhs.head(D) = -r;
  const Vec2 delta = A.householderQr().solve(rhs);
  out.x = x_s + delta;
  out.step_norm = delta.norm();
  return out;
}

struct PixelTrack {
  Vec2 x = Vec2::Zero();
  bool converged = false;  // last step below tolerance
  bool lost = false;       // left the stencil-valid region
  int iterations = 0;
};

inline PixelTrack track_pixel(const FeatureMap& tgt, const Vec2& start, const Eigen::VectorXd& f_t,
                              double epsilon, int max_iterations = 30, double step_tol = 1e-3) {
  PixelTrack t;
  t.x = start;
  for (t.iterations = 0; t.iterations < max_iterations;) {
    const auto step = pixel_gn_step(tgt, t.x, f_t, epsilon);
    if (!step || !step->x.allFinite()) {
      t.lost = true;
      return t;
    }
    t.x = step->x;
    ++t.iterations;
    if (step->step_norm < step_tol) {
      t.converged = true;
      break;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Pose system
// ---------------------------------------------------------------------------

/// Linearization of one point: its projection, dp'/dxi, and the weighted
/// per-pixel system H' = J'^T W J', b' = -J'^T W r.
struct PointLinearization {
  Vec2 projected = Vec2::Zero();
  Mat26 dp_dxi = Mat26::Zero();
  PixelSystem pixel;
  Eigen::MatrixX2d feature_gradient;
  Eigen::VectorXd r;
  double weight = 0.0;
  double gradient_weight = 1.0;
};

inline std::optional<PointLinearization> linearize_point(const FeatureMap& tgt,
                                                         const PointWithDepth& point,
                                                         const Eigen::VectorXd& f_ref,
                                                         const SE3Pose& pose,
                                                         const CameraIntrinsics& intr,
                                                         const AlignmentConfig& cfg) {
  const auto p = project(point, pose, intr, cfg.border);
  if (!p || !in_sampling_region(tgt, *p, 1.0)) return std::nullopt;
  PointLinearization L;
  L.projected = *p;
  L.dp_dxi = pose_jacobian(point, pose, intr, cfg.border);
  L.feature_gradient = sample_gradient(tgt, *p);
  L.r = sample(tgt, *p) - f_ref;
  L.gradient_weight = gradient_weight(L.feature_gradient, cfg);
  L.weight = L.gradient_weight * huber_weight(L.r.norm(), cfg.huber_delta);
  L.pixel.H = L.weight * (L.feature_gradient.transpose() * L.feature_gradient);
  L.pixel.b = -L.weight * (L.feature_gradient.transpose() * L.r);
  L.pixel.residual_sq_sum = L.r.squaredNorm();
  L.pixel.valid_points = 1;
  return L;
}

/// Reference point with its descriptor sampled once.
struct ReferencePoint {
  PointWithDepth point;
  Eigen::VectorXd descriptor;
};

inline std::vector<ReferencePoint> sample_reference(const FeatureMap& ref,
                                                    std::span<const PointWithDepth> points) {
  std::vector<ReferencePoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (in_sampling_region(ref, p.pixel, 0.0)) out.push_back({p, sample(ref, p.pixel)});
  }
  return out;
}

/// Direct assembly: H = sum J^T W J, b = -sum J^T W r with J = J' dp'/dxi.
inline PoseSystem build_pose_system(const FeatureMap& tgt, std::span<const ReferencePoint> points,
                                    const SE3Pose& pose, const CameraIntrinsics& intr,
                                    const AlignmentConfig& cfg) {
  PoseSystem sys;
  for (const auto& rp : points) {
    const auto L = linearize_point(tgt, rp.point, rp.descriptor, pose, intr, cfg);
    if (!L) {
      ++sys.invalid_points;
      continue;
    }
    const Eigen::Matrix<double, Eigen::Dynamic, 6> J = L->feature_gradient * L->dp_dxi;
    sys.H.noalias() += L->weight * (J.transpose() * J);
    sys.b.noalias() -= L->weight * (J.transpose() * L->r);
    const double s = L->r.norm();
    sys.residual_sq_sum += s * s;
    sys.energy += L->gradient_weight * huber_energy(s, cfg.huber_delta);
    if (s <= cfg.huber_delta) ++sys.inliers;
    ++sys.valid_points;
  }
  sys.H = 0.5 * (sys.H + sys.H.transpose()).eval();
  return sys;
}

inline PoseSystem build_pose_system(const FeatureMap& ref, const FeatureMap& tgt,
                                    std::span<const PointWithDepth> points, const SE3Pose& pose,
                                    const CameraIntrinsics& intr, const AlignmentConfig& cfg) {
  const auto rps = sample_reference(ref, points);
  PoseSystem sys = build_pose_system(tgt, rps, pose, intr, cfg);
  sys.invalid_points += points.size() - rps.size();
  return sys;
}

/// Pose system from per-pixel systems: H = sum P^T H'_i P, b = sum P^T b'_i
/// with P = dp'/dxi.
inline PoseSystem recombine(std::span<const PointLinearization> points) {
  PoseSystem sys;
  for (const auto& L : points) {
    sys.H.noalias() += L.dp_dxi.transpose() * L.pixel.H * L.dp_dxi;
    sys.b.noalias() += L.dp_dxi.transpose() * L.pixel.b;
    sys.residual_sq_sum += L.pixel.residual_sq_sum;
    ++sys.valid_points;
  }
  return sys;
}

// ---------------------------------------------------------------------------
// Coarse-to-fine pose alignment
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<PointWithDepth> points_at_level(std::span<const PointWithDepth> points, int level) {
  const double s = 1.0 / static_cast<double>(1 << level);
  std::vector<PointWithDepth> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back({p.pixel * s, p.inverse_depth});
  return out;
}

}  // namespace detail

enum class LevelOutcome { converged, max_iterations, diverged, lost };

/// Levenberg-Marquardt on one pyramid level. `pose` is updated in place.
inline LevelOutcome align_level(const FeatureMap& tgt, std::span<const ReferencePoint> points,
                                SE3Pose& pose, const CameraIntrinsics& intr,
                                const AlignmentConfig& cfg, TrackResult& result) {
  PoseSystem sys = build_pose_system(tgt, points, pose, intr, cfg);
  if (sys.valid_points < cfg.min_points) return LevelOutcome::lost;
  result.energy_history.push_back(sys.mean_energy());
  double lambda = cfg.initial_damping;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    ++result.iterations;
    Mat6 A = sys.H;
    A.diagonal() += lambda * sys.H.diagonal();
    const Vec6 delta = A.ldlt().solve(sys.b);
    if (!delta.allFinite()) {
      result.rank_deficient = true;
      return LevelOutcome::diverged;
    }
    const double step = delta.norm();
    result.last_step_norm = step;

    const SE3Pose candidate = se3_exp(delta) * pose;
    const PoseSystem next = build_pose_system(tgt, points, candidate, intr, cfg);
    const bool usable = next.valid_points >= cfg.min_points;
    if (usable && next.mean_energy() <= sys.mean_energy()) {
      pose = candidate;
      sys = next;
      result.energy_history.push_back(sys.mean_energy());
      lambda *= cfg.damping_decrease;
      if (step < cfg.step_norm_tol) return LevelOutcome::converged;
    } else {
      if (step < cfg.step_norm_tol) return LevelOutcome::converged;
      lambda *= cfg.damping_increase;
      if (lambda > cfg.max_damping) return LevelOutcome::diverged;
    }
  }
  return LevelOutcome::max_iterations;
}

/// Aligns the target pyramid to the reference points, starting from `init`.
/// `points` and `intr` are level-0 quantities.
inline TrackResult align_pose(const FeaturePyramid& ref, const FeaturePyramid& tgt,
                              std::span<const PointWithDepth> points, const SE3Pose& init,
                              const CameraIntrinsics& intr, const AlignmentConfig& cfg) {
  cfg.validate();
  intr.validate();
  if (!init.is_finite()) throw DomainError("align_pose: non-finite initial pose");
  if (ref.size() != tgt.size()) throw ShapeError("align_pose: pyramid depths differ");
  TrackResult result;
  result.pose = init;
  LevelOutcome outcome = LevelOutcome::lost;
  for (int level : cfg.levels) {
    if (level >= static_cast<int>(ref.size())) {
      throw ConfigError("align_pose: level " + std::to_string(level) + " not in pyramid");
    }
    const auto l = static_cast<std::size_t>(level);
    const auto scaled = detail::points_at_level(points, level);
    const auto rps = sample_reference(ref[l], scaled);
    outcome = align_level(tgt[l], rps, result.pose, intr.at_level(level), cfg, result);
    if (outcome == LevelOutcome::lost) break;
  }
  result.converged = outcome == LevelOutcome::converged;

  const auto rps = sample_reference(ref[0], points);
  const PoseSystem final_sys = build_pose_system(tgt[0], rps, result.pose, intr, cfg);
  if (final_sys.valid_points > 0) {
    result.final_residual = std::sqrt(final_sys.residual_sq_sum / static_cast<double>(final_sys.valid_points));
    result.inlier_fraction = static_cast<double>(final_sys.inliers) / static_cast<double>(points.size());
  }
  if (final_sys.valid_points < cfg.min_points) result.converged = false;
  return result;
}

// ---------------------------------------------------------------------------
// Keyframes and candidates
// ---------------------------------------------------------------------------

/// Greedy gradient-magnitude selection: strongest pixels first, no two
/// selected pixels closer than `spacing` in either axis.
inline std::vector<Vec2> select_points(const tensor::Tensor& image, std::size_t max_points,
                                       int spacing, double border) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("select_points: expects (1, H, W)");
  const int H = static_cast<int>(image.dim(1)), W = static_cast<int>(image.dim(2));
  const int b = static_cast<int>(std::ceil(border));
  struct Candidate {
    double magnitude;
    int y, x;
  };
  std::vector<Candidate> cands;
  for (int y = std::max(b, 1); y < H - std::max(b, 1); ++y) {
    for (int x = std::max(b, 1); x < W - std::max(b, 1); ++x) {
      const double gx = 0.5 * (image.at(0, y, x + 1) - image.at(0, y, x - 1));
      const double gy = 0.5 * (image.at(0, y + 1, x) - image.at(0, y - 1, x));
      cands.push_back({gx * gx + gy * gy, y, x});
    }
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& a, const Candidate& c) { return a.magnitude > c.magnitude; });
  std::vector<char> blocked(static_cast<std::size_t>(H * W), 0);
  std::vector<Vec2> out;
  for (const auto& c : cands) {
    if (out.size() >= max_points || c.magnitude <= 0.0) break;
    if (blocked[static_cast<std::size_t>(c.y * W + c.x)]) continue;
    out.emplace_back(c.x, c.y);
    for (int dy = -spacing + 1; dy < spacing; ++dy) {
      for (int dx = -spacing + 1; dx < spacing; ++dx) {
        const int yy = c.y + dy, xx = c.x + dx;
        if (yy >= 0 && yy < H && xx >= 0 && xx < W) blocked[static_cast<std::size_t>(yy * W + xx)] = 1;
      }
    }
  }
  return out;
}

/// Reference frame with sparse depths.
struct Keyframe {
  tensor::Tensor image;  // (1, H, W), 0..255
  CameraIntrinsics intrinsics;
  std::vector<PointWithDepth> points;
};

using PyramidExtractor = std::function<FeaturePyramid(const tensor::Tensor& image)>;

/// Tracks a candidate image against a keyframe from the identity pose.
inline TrackResult track_candidate(const Keyframe& kf, const tensor::Tensor& candidate,
                                   const PyramidExtractor& extract, const AlignmentConfig& cfg) {
  if (candidate.shape() != kf.image.shape()) throw ShapeError("track_candidate: image size mismatch");
  const FeaturePyramid ref = extract(kf.image);
  const FeaturePyramid tgt = extract(candidate);
  return align_pose(ref, tgt, kf.points, SE3Pose::identity(), kf.intrinsics, cfg);
}

}  // namespace gnnet
