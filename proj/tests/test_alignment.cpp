#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <random>

#include "classic_reference.hpp"
#include "gnnet/alignment.hpp"
#include "gnnet/losses.hpp"
#include "support.hpp"

namespace gnnet {
namespace {

CameraIntrinsics camera() { return {60.0, 60.0, 31.5, 31.5, 64, 64}; }

// Scalar residual oracle with its own interpolation.
Eigen::VectorXd naive_residual(const FeatureMap& ref, const FeatureMap& tgt, const PointWithDepth& p,
                               const SE3Pose& T, const CameraIntrinsics& cam) {
  const double z = 1.0 / p.inverse_depth;
  const Vec3 X((p.pixel.x() - cam.cx) / cam.fx * z, (p.pixel.y() - cam.cy) / cam.fy * z, z);
  const Vec3 Y = T.rotation * X + T.translation;
  const double u = cam.fx * Y.x() / Y.z() + cam.cx, v = cam.fy * Y.y() / Y.z() + cam.cy;
  auto interp = [](const FeatureMap& m, std::size_t c, double x, double y) {
    const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
    const double a = x - static_cast<double>(x0), b = y - static_cast<double>(y0);
    return (1 - a) * (1 - b) * m.at(c, y0, x0) + a * (1 - b) * m.at(c, y0, x0 + 1) +
           (1 - a) * b * m.at(c, y0 + 1, x0) + a * b * m.at(c, y0 + 1, x0 + 1);
  };
  Eigen::VectorXd r(static_cast<Eigen::Index>(map_channels(ref)));
  for (std::size_t c = 0; c < map_channels(ref); ++c) {
    r[static_cast<Eigen::Index>(c)] = interp(tgt, c, u, v) - interp(ref, c, p.pixel.x(), p.pixel.y());
  }
  return r;
}

FeatureMap random_map(std::mt19937_64& rng, std::size_t d, std::size_t h, std::size_t w) {
  return test::random_tensor(rng, {d, h, w});
}

TEST(Residual, IdentityAndConstantOffset) {
  std::mt19937_64 rng(1);
  const auto cam = camera();
  const FeatureMap f = random_map(rng, 3, 64, 64);
  FeatureMap g = f;
  for (double& v : g.data()) v += 0.25;
  for (int i = 0; i < 50; ++i) {
    const auto p = test::random_point(rng, cam, 0.2, 1.0);
    EXPECT_LT(residual(f, f, p, SE3Pose::identity(), cam)->norm(), 1e-12);  // projection round-off only
    const auto r = residual(f, g, p, SE3Pose::identity(), cam);
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR((*r)[c], 0.25, 1e-14);
  }
}

TEST(Residual, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(2);
  const auto cam = camera();
  const FeatureMap f = random_map(rng, 4, 64, 64), g = random_map(rng, 4, 64, 64);
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    const SE3Pose T = se3_exp(test::random_twist(rng, 0.1, 0.05));
    const auto p = test::random_point(rng, cam, 0.3, 1.0);
    const auto r = residual(f, g, p, T, cam);
    if (!r) continue;
    EXPECT_LT((*r - naive_residual(f, g, p, T, cam)).cwiseAbs().maxCoeff(), 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 300);
  SE3Pose away;
  away.translation = Vec3(50, 0, 0);
  EXPECT_FALSE(residual(f, g, {{30, 30}, 0.5}, away, cam));
}

// F(x) = A (x - x*) per channel; bilinear lookup and central differences of
// a linear field are exact.
FeatureMap linear_field(const Eigen::MatrixX2d& A, const Vec2& x_star, std::size_t h, std::size_t w) {
  FeatureMap m({static_cast<std::size_t>(A.rows()), h, w});
  for (std::size_t c = 0; c < m.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        m.at(c, y, x) = A.row(static_cast<Eigen::Index>(c)).dot(Vec2(x, y) - x_star);
  return m;
}

TEST(PixelStep, LinearFieldLandsOnTargetInOneStep) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(8.0, 22.0);
  for (int i = 0; i < 100; ++i) {
    Eigen::MatrixX2d A(3, 2);
    for (Eigen::Index k = 0; k < 6; ++k) A(k / 2, k % 2) = u(rng);
    const Vec2 x_star(pos(rng), pos(rng)), x_s(pos(rng), pos(rng));
    const FeatureMap m = linear_field(A, x_star, 32, 32);
    const auto step = pixel_gn_step(m, x_s, Eigen::VectorXd::Zero(3), 1e-12);
    ASSERT_TRUE(step);
    EXPECT_LT((step->x - x_star).norm(), 1e-6);
  }
}

TEST(PixelStep, ZeroResidualGivesZeroStep) {
  std::mt19937_64 rng(4);
  const FeatureMap m = random_map(rng, 5, 20, 20);
  const Vec2 xs(7.3, 11.6);
  const auto step = pixel_gn_step(m, xs, sample(m, xs), 1e-3);
  ASSERT_TRUE(step);
  EXPECT_EQ(step->x, xs);
  EXPECT_EQ(step->system.b, Vec2::Zero());
}

TEST(PixelStep, RankOneGradientMovesAlongGradientOnly) {
  Eigen::MatrixX2d A(1, 2);
  A << 0.6, 0.8;  // unit gradient direction
  const FeatureMap m = linear_field(A, Vec2(15, 15), 32, 32);
  const Vec2 xs(12.2, 17.9);
  const auto step = pixel_gn_step(m, xs, Eigen::VectorXd::Zero(1), 1e-9);
  ASSERT_TRUE(step);
  const Vec2 d = step->x - xs;
  const Vec2 perp(-0.8, 0.6);
  EXPECT_LT(std::abs(d.dot(perp)), 1e-9);
  EXPECT_GT(std::abs(d.dot(Vec2(0.6, 0.8))), 0.1);
}

TEST(PixelStep, AgreesWithLossSideMean) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> pos(2.0, 17.0);
  for (int i = 0; i < 200; ++i) {
    const FeatureMap m = random_map(rng, 4, 20, 20);
    const Vec2 xs(pos(rng), pos(rng));
    const Eigen::VectorXd f_t = sample(m, Vec2(pos(rng), pos(rng)));
    const auto step = pixel_gn_step(m, xs, f_t, 1e-3);
    ASSERT_TRUE(step);
    const GaussianBelief g =
        gauss_newton_belief(sample_gradient(m, xs), sample(m, xs) - f_t, xs, 1e-3);
    EXPECT_LT((step->x - g.mean).norm(), 1e-9 * std::max(1.0, (g.mean - xs).norm()));
  }
}

TEST(PixelStep, StencilOutsideMapIsAFailure) {
  const FeatureMap m({1, 10, 10}, 1.0);
  EXPECT_FALSE(pixel_gn_step(m, Vec2(0.5, 5), Eigen::VectorXd::Zero(1), 1e-3));
  EXPECT_TRUE(pixel_gn_step(m, Vec2(1.0, 5), Eigen::VectorXd::Zero(1), 1e-3));
  const auto t = track_pixel(m, Vec2(0.2, 0.2), Eigen::VectorXd::Zero(1), 1e-3);
  EXPECT_TRUE(t.lost);
}

TEST(PoseSystem, ZeroResidualsGiveZeroB) {
  std::mt19937_64 rng(5);
  const auto cam = camera();
  const FeatureMap f = random_map(rng, 3, 64, 64);
  std::vector<PointWithDepth> pts;
  for (int i = 0; i < 40; ++i) pts.push_back(test::random_point(rng, cam, 0.3, 1.0));
  const PoseSystem s = build_pose_system(f, f, pts, SE3Pose::identity(), cam, AlignmentConfig{});
  EXPECT_LT(s.b.norm(), 1e-10);
  EXPECT_EQ(s.valid_points, 40u);
  EXPECT_EQ(s.H, s.H.transpose());
}

TEST(PoseSystem, RecombinationIdentity) {
  std::mt19937_64 rng(6);
  const auto cam = camera();
  for (int scene = 0; scene < 30; ++scene) {
    const FeatureMap f = random_map(rng, 4, 64, 64), g = random_map(rng, 4, 64, 64);
    const SE3Pose T = se3_exp(test::random_twist(rng, 0.05, 0.03));
    AlignmentConfig cfg;
    cfg.gradient_weighting = scene % 2 == 0;
    cfg.huber_delta = 0.8;
    std::vector<PointWithDepth> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(test::random_point(rng, cam, 0.3, 1.0));
    const auto rps = sample_reference(f, pts);
    const PoseSystem direct = build_pose_system(g, rps, T, cam, cfg);
    std::vector<PointLinearization> lin;
    for (const auto& rp : rps) {
      if (auto L = linearize_point(g, rp.point, rp.descriptor, T, cam, cfg)) lin.push_back(*L);
    }
    const PoseSystem combined = recombine(lin);
    EXPECT_LT((direct.H - combined.H).norm() / direct.H.norm(), 1e-10);
    EXPECT_LT((direct.b - combined.b).norm() / direct.b.norm(), 1e-10);
    EXPECT_EQ(direct.valid_points, combined.valid_points);
  }
}

TEST(PoseSystem, SinglePointSingleChannelIsRankOne) {
  std::mt19937_64 rng(7);
  const auto cam = camera();
  const FeatureMap f = random_map(rng, 1, 64, 64), g = random_map(rng, 1, 64, 64);
  const std::vector<PointWithDepth> pts{{{30.2, 28.7}, 0.5}};
  const PoseSystem s = build_pose_system(f, g, pts, SE3Pose::identity(), cam, AlignmentConfig{});
  const Eigen::SelfAdjointEigenSolver<Mat6> es(s.H);
  int rank = 0;
  for (int i = 0; i < 6; ++i) rank += es.eigenvalues()[i] > 1e-9 * es.eigenvalues().cwiseAbs().maxCoeff();
  EXPECT_LE(rank, 2);
}

TEST(AlignPose, FixedPointAtGroundTruth) {
  // Linear target field; reference values at integer pixels are the target
  // field seen through T*, so every residual vanishes at T*.
  const auto cam = camera();
  Eigen::MatrixX2d A(2, 2);
  A << 0.7, -0.2, 0.3, 0.9;
  const FeatureMap tgt = linear_field(A, Vec2(31, 30), 64, 64);
  const SE3Pose T_star = se3_exp((Vec6() << 0.02, -0.01, 0.03, 0.01, -0.02, 0.005).finished());
  FeatureMap ref({2, 64, 64}, 0.0);
  std::vector<PointWithDepth> pts;
  for (int y = 8; y < 56; y += 4) {
    for (int x = 8; x < 56; x += 4) {
      const PointWithDepth p{Vec2(x, y), 1.0 / (2.0 + 0.01 * x)};
      const Vec2 q = *project(p, T_star, cam);
      for (std::size_t c = 0; c < 2; ++c) {
        ref.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            A.row(static_cast<Eigen::Index>(c)).dot(q - Vec2(31, 30));
      }
      pts.push_back(p);
    }
  }
  AlignmentConfig cfg;
  cfg.levels = {0};
  const TrackResult r = align_pose({{ref}}, {{tgt}}, pts, T_star, cam, cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.pose.matrix() - T_star.matrix()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT(r.final_residual, 1e-9);
}

TEST(AlignPose, RecoversSmallBaselineOnSyntheticScene) {
  const auto cam = camera();
  const test::PlaneScene scene;
  const SE3Pose T_star = se3_exp((Vec6() << 0.06, -0.04, 0.05, 0.01, 0.015, -0.01).finished());
  const auto ref_img = scene.render(cam, SE3Pose::identity());
  const auto tgt_img = scene.render(cam, T_star);
  const auto pts = test::plane_points(scene, cam, 3, 4);
  AlignmentConfig cfg = AlignmentConfig::intensity();
  const TrackResult r = align_pose(image_pyramid(ref_img, 3), image_pyramid(tgt_img, 3), pts,
                                   SE3Pose::identity(), cam, cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.pose.translation - T_star.translation).norm(), 1e-3);
  EXPECT_LT(r.last_step_norm, cfg.step_norm_tol);
}

TEST(AlignPose, AcceptedStepsNeverIncreaseEnergy) {
  std::mt19937_64 rng(8);
  const auto cam = camera();
  for (int trial = 0; trial < 10; ++trial) {
    test::PlaneScene scene;
    scene.channels = 3;
    const SE3Pose T_star = se3_exp(test::random_twist(rng, 0.15, 0.05));
    const auto pts = test::plane_points(scene, cam, 4, 4);
    AlignmentConfig cfg;
    cfg.huber_delta = 20.0;
    const TrackResult r = align_pose(image_pyramid(scene.render(cam, SE3Pose::identity()), 3),
                                     image_pyramid(scene.render(cam, T_star), 3), pts,
                                     SE3Pose::identity(), cam, cfg);
    // The history restarts at each level (a different map); within a level it
    // never rises, so at most levels-1 rises in total.
    int rises = 0;
    for (std::size_t i = 1; i < r.energy_history.size(); ++i) rises += r.energy_history[i] > r.energy_history[i - 1];
    EXPECT_LE(rises, static_cast<int>(cfg.levels.size()) - 1);
  }
}

TEST(AlignPose, DeterministicAndFailsWithoutOverlap) {
  const auto cam = camera();
  const test::PlaneScene scene;
  const auto ref = image_pyramid(scene.render(cam, SE3Pose::identity()), 3);
  const auto tgt = image_pyramid(scene.render(cam, se3_exp((Vec6() << 0.05, 0, 0, 0, 0, 0).finished())), 3);
  const auto pts = test::plane_points(scene, cam, 4, 4);
  const auto cfg = AlignmentConfig::intensity();
  const TrackResult a = align_pose(ref, tgt, pts, SE3Pose::identity(), cam, cfg);
  const TrackResult b = align_pose(ref, tgt, pts, SE3Pose::identity(), cam, cfg);
  EXPECT_EQ(a.pose.matrix(), b.pose.matrix());
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_EQ(a.energy_history, b.energy_history);

  SE3Pose far;
  far.translation = Vec3(30.0, 0, 0);
  const TrackResult lost = align_pose(ref, tgt, pts, far, cam, cfg);
  EXPECT_FALSE(lost.converged);
}

TEST(AlignPose, MatchesScalarClassicAlignment) {
  std::mt19937_64 rng(9);
  const auto cam = camera();
  for (int trial = 0; trial < 5; ++trial) {
    test::PlaneScene scene;
    scene.z0 = 1.8 + 0.1 * trial;
    const SE3Pose T_star = se3_exp(test::random_twist(rng, 0.04, 0.02));
    const auto ref_img = scene.render(cam, SE3Pose::identity());
    const auto tgt_img = scene.render(cam, T_star);
    const auto pts = test::plane_points(scene, cam, 3, 4);

    AlignmentConfig cfg = AlignmentConfig::intensity();
    cfg.levels = {0};
    const PoseSystem H0 = build_pose_system(ref_img, tgt_img, pts, SE3Pose::identity(), cam, cfg);
    const TrackResult lib = align_pose({{ref_img}}, {{tgt_img}}, pts, SE3Pose::identity(), cam, cfg);

    classic::Gray r{64, 64, std::vector<double>(ref_img.data().begin(), ref_img.data().end())};
    classic::Gray t{64, 64, std::vector<double>(tgt_img.data().begin(), tgt_img.data().end())};
    std::vector<classic::Point> cp;
    for (const auto& p : pts) cp.push_back({p.pixel.x(), p.pixel.y(), p.inverse_depth});
    const classic::Result ref_res = classic::align(r, t, cp, {}, {cam.fx, cam.fy, cam.cx, cam.cy, 64, 64}, {});

    EXPECT_LT((H0.H - ref_res.first_system.H).norm() / H0.H.norm(), 1e-9);
    EXPECT_LT((H0.b - ref_res.first_system.b).norm() / H0.b.norm(), 1e-9);
    EXPECT_EQ(lib.converged, ref_res.converged);
    Mat4 ref_pose = Mat4::Identity();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) ref_pose(i, j) = ref_res.pose.R[i][j];
      ref_pose(i, 3) = ref_res.pose.t[i];
    }
    EXPECT_LT((lib.pose.matrix() - ref_pose).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Keyframe, SelectedPointsRespectSpacing) {
  const auto cam = camera();
  const test::PlaneScene scene;
  const auto img = scene.render(cam, SE3Pose::identity());
  const auto pts = select_points(img, 512, 4, 2.0);
  EXPECT_GT(pts.size(), 100u);
  EXPECT_LE(pts.size(), 512u);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_GE(pts[i].minCoeff(), 2.0);
    EXPECT_LE(pts[i].maxCoeff(), 61.0);
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      EXPECT_GE((pts[i] - pts[j]).cwiseAbs().maxCoeff(), 4.0);
    }
  }
}

TEST(Keyframe, CandidateEqualToReferenceStaysAtIdentity) {
  const auto cam = camera();
  const test::PlaneScene scene;
  Keyframe kf;
  kf.image = scene.render(cam, SE3Pose::identity());
  kf.intrinsics = cam;
  for (const Vec2& p : select_points(kf.image, 256, 4, 2.0)) kf.points.push_back({p, 1.0 / scene.depth(cam, p)});
  const TrackResult r = track_candidate(kf, kf.image, [](const tensor::Tensor& im) { return image_pyramid(im, 3); },
                                        AlignmentConfig::intensity());
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.pose.matrix() - Mat4::Identity()).cwiseAbs().maxCoeff(), 1e-6);
}

}  // namespace
}  // namespace gnnet
