#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gnnet/gradcheck_suite.hpp"
#include "gnnet/pipeline.hpp"

namespace gnnet::pipeline {
namespace {

bench::DatasetConfig tiny() {
  bench::DatasetConfig d;
  d.scene.frames = 4;
  d.scene.candidates = 4;
  d.scene.conditions = {{}, {1.5, 30.0, 1.0, 2.0, 0.0, 1.0}};
  d.train_scenes = 1;
  d.val_scenes = 1;
  d.test_scenes = 1;
  d.pairs_per_scene = 4;
  d.positives = 16;
  d.negatives = 16;
  return d;
}

const bench::Dataset& tiny_dataset() {
  static const bench::Dataset ds = bench::generate_dataset(tiny());
  return ds;
}

TrainConfig small_training() {
  TrainConfig t;
  t.network.base_width = 4;
  t.network.descriptor_dim = 4;
  t.epochs = 1;
  return t;
}

TEST(Images, ConversionKeepsValues) {
  bench::Image8 img{3, 2, {0, 10, 20, 128, 250, 255}};
  const auto t = image_tensor(img);
  ASSERT_EQ(t.shape(), (tensor::Shape{1, 2, 3}));
  EXPECT_EQ(t.at(0, 1, 2), 255.0);
  EXPECT_EQ(t.at(0, 0, 1), 10.0);
  EXPECT_DOUBLE_EQ(network_input(t).at(0, 1, 0), 128.0 / 255.0);
}

TEST(Keyframe, PointsCarryGroundTruthDepth) {
  const auto& scene = tiny_dataset().split("test").scenes[0];
  const auto& f = scene.frame(0);
  const Keyframe kf = make_keyframe(f, scene.intrinsics, {});
  ASSERT_GT(kf.points.size(), 100u);
  for (const auto& p : kf.points) {
    EXPECT_EQ(p.pixel.x(), std::round(p.pixel.x()));
    EXPECT_DOUBLE_EQ(1.0 / p.inverse_depth, f.depth.at(static_cast<int>(p.pixel.y()), static_cast<int>(p.pixel.x())));
  }
}

TEST(Evaluation, DeterministicAndCoversEveryCandidate) {
  const auto& test = tiny_dataset().split("test");
  const auto a = evaluate_split(test, intensity_extractor(3), AlignmentConfig::intensity());
  const auto b = evaluate_split(test, intensity_extractor(3), AlignmentConfig::intensity());
  EXPECT_EQ(a.errors, b.errors);
  EXPECT_EQ(a.summary.candidates, 4u);
}

TEST(Evaluation, CandidateIdenticalToReferenceIsExact) {
  bench::Split split = tiny_dataset().split("test");
  auto& scene = split.scenes[0];
  for (auto& c : scene.candidates) {
    // point the candidate at a copy of its reference frame
    scene.frames[static_cast<std::size_t>(c.candidate_frame)].image = scene.frame(c.reference_frame).image;
    c.relative_pose = SE3Pose::identity();
  }
  const auto ev = evaluate_split(split, intensity_extractor(3), AlignmentConfig::intensity());
  for (double e : ev.errors) EXPECT_LT(e, 1e-6);
}

TEST(Training, PairsRespectFrameGap) {
  const auto& train = tiny_dataset().split("train");
  const auto all = training_pairs(train, 5);
  EXPECT_EQ(all.size(), 4u);
  for (const auto& p : training_pairs(train, 1)) {
    EXPECT_LE(std::abs(p.scene->frame(p.batch->frame_a).index - p.scene->frame(p.batch->frame_b).index), 1);
  }
}

TEST(Training, OneEpochWritesLoadableWeights) {
  const TrainResult r = train(tiny_dataset(), small_training());
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.log[0].total));
  EXPECT_GT(r.log[0].contrastive, 0.0);
  EXPECT_TRUE(std::isfinite(r.log[0].validation_auc));
  EXPECT_EQ(r.best_epoch, 1);
  const auto path = std::filesystem::temp_directory_path() / "gnnet_test_pipeline.gnnw";
  save_network(path.string(), r.best);
  const NetworkWeights back = load_network(path.string());
  ASSERT_EQ(back.params.size(), r.best.params.size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    EXPECT_EQ(back.params[i].value.data().size(), r.best.params[i].value.data().size());
    EXPECT_TRUE(std::equal(back.params[i].value.data().begin(), back.params[i].value.data().end(),
                           r.best.params[i].value.data().begin()));
  }
  std::filesystem::remove(path);
}

TEST(Training, DeterministicGivenSeeds) {
  TrainConfig cfg = small_training();
  cfg.validate = false;
  cfg.epochs = 2;
  const TrainResult a = train(tiny_dataset(), cfg), b = train(tiny_dataset(), cfg);
  EXPECT_EQ(training_log_csv(a.log), training_log_csv(b.log));
  EXPECT_EQ(a.best_epoch, 2);
  for (std::size_t i = 0; i < a.last.params.size(); ++i) {
    EXPECT_TRUE(std::equal(a.last.params[i].value.data().begin(), a.last.params[i].value.data().end(),
                           b.last.params[i].value.data().begin()));
  }
}

TEST(Training, DivergenceAbortsWithDiagnostics) {
  TrainConfig cfg = small_training();
  cfg.validate = false;
  cfg.epochs = 3;
  cfg.adam.lr = 1e150;
  try {
    train(tiny_dataset(), cfg);
    FAIL() << "expected a numerical fault";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("train:"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("frames"), std::string::npos);
  }
}

TEST(Training, RejectsBadConfig) {
  TrainConfig cfg = small_training();
  cfg.epochs = 0;
  EXPECT_THROW(train(tiny_dataset(), cfg), ConfigError);
  cfg = small_training();
  cfg.loss.margin = 0.0;
  cfg.loss.gn_weight = 0.0;
  EXPECT_THROW(train(tiny_dataset(), cfg), ConfigError);
}

TEST(Basin, TrialsAreDeterministicAndInsideTheDisk) {
  BasinConfig cfg;
  cfg.trials = 300;
  const auto a = basin_trials(tiny_dataset().split("test"), cfg);
  const auto b = basin_trials(tiny_dataset().split("test"), cfg);
  ASSERT_EQ(a.size(), 300u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].start_b, b[i].start_b);
    EXPECT_LE((a[i].start_b - a[i].truth_b).norm(), cfg.radius);
  }
}

TEST(Basin, StartingAtTheTruthOfAnIdenticalPairSucceeds) {
  const auto& scene = tiny_dataset().split("test").scenes[0];
  std::vector<BasinTrial> trials;
  for (int y = 10; y < 54; y += 5)
    for (int x = 10; x < 54; x += 5) trials.push_back({&scene, 0, 0, Vec2(x, y), Vec2(x, y), Vec2(x, y)});
  const BasinResult r = basin_experiment(trials, intensity_extractor(3), {});
  EXPECT_EQ(r.successes, r.trials);
}

TEST(Gradcheck, NetworkLossesMatchFiniteDifferences) {
  NetworkGradcheckConfig cfg;
  cfg.image_size = 16;
  const NetworkGradcheckReport r = network_gradcheck(cfg);
  ASSERT_EQ(r.terms.size(), 3u);
  EXPECT_LT(r.max_relative_error(), 1e-4);
}

GradcheckReport gradcheck_with_scaled_backward(double factor) {
  const NetworkConfig nc{1, 4, 2, 4, 1};
  const NetworkWeights net = build_network(nc);
  const tensor::Tensor ia = noise_image(16, 3, 6.0), ib = noise_image(16, 4, 6.0);
  CorrespondenceBatch batch;
  batch.positives = {{Vec2(6.3, 7.1), Vec2(7.0, 8.2)}, {Vec2(9.5, 5.2), Vec2(9.1, 5.9)}};
  return gradcheck(net.params, [&](tensor::Tape& tape, std::span<const tensor::Var> w) {
    std::vector<tensor::Var> ws(w.begin(), w.end());
    const std::size_t id = ws[0].id();
    // identity on the first weight block whose backward is scaled by factor
    ws[0] = tape.record(ws[0].value(), {ws[0]}, [id, factor](tensor::Tape& t, std::size_t self) {
      const tensor::Tensor& g = *t.grad_if(self);
      tensor::Tensor& ga = t.accumulate(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
    LossConfig loss;
    loss.margin = 0.0;
    loss.gn_weight = 1.0;
    Rng rng(7);
    return total_loss(forward(nc, ws, tape.constant(ia)), forward(nc, ws, tape.constant(ib)), batch, loss, rng).total;
  });
}

TEST(Gradcheck, DetectsABrokenBackward) {
  const GradcheckReport clean = gradcheck_with_scaled_backward(1.0);
  const GradcheckReport broken = gradcheck_with_scaled_backward(1.5);
  ASSERT_EQ(clean.blocks.size(), broken.blocks.size());
  EXPECT_LT(clean.blocks[0].max_relative_error, 1e-3);
  EXPECT_GT(broken.blocks[0].max_relative_error, 0.3);
  for (std::size_t b = 1; b < clean.blocks.size(); ++b) {
    EXPECT_EQ(broken.blocks[b].max_relative_error, clean.blocks[b].max_relative_error);
  }
}

}  // namespace
}  // namespace gnnet::pipeline
