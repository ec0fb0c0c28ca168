#pragma once

// Training, relocalization evaluation, and the per-pixel basin experiment.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gnnet/alignment.hpp"
#include "gnnet/bench.hpp"
#include "gnnet/feature_net.hpp"
#include "gnnet/losses.hpp"
#include "gnnet/optim.hpp"

namespace gnnet::pipeline {

enum class Method { intensity, trained, contrastive };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::intensity: return "intensity";
    case Method::trained: return "gn_net";
    case Method::contrastive: return "contrastive_only";
  }
  return "unknown";
}

/// (1, H, W) tensor of raw intensities 0..255.
inline tensor::Tensor image_tensor(const bench::Image8& img) {
  tensor::Tensor t({1, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i];
  return t;
}

/// Network input: intensities scaled to [0, 1].
inline tensor::Tensor network_input(const tensor::Tensor& image_0_255) {
  tensor::Tensor t = image_0_255;
  for (double& v : t.data()) v /= 255.0;
  return t;
}

inline PyramidExtractor intensity_extractor(int levels) {
  return [levels](const tensor::Tensor& image) { return image_pyramid(image, levels); };
}

inline PyramidExtractor network_extractor(const NetworkWeights& net) {
  return [&net](const tensor::Tensor& image) { return extract_pyramid(net, network_input(image)); };
}

inline AlignmentConfig alignment_for(Method m) {
  return m == Method::intensity ? AlignmentConfig::intensity() : AlignmentConfig{};
}

struct EvalConfig {
  std::size_t max_points = 300;
  int point_spacing = 3;
  double point_border = 4.0;
};

/// Reference keyframe with sparse points carrying ground-truth depth.
inline Keyframe make_keyframe(const bench::Frame& ref, const CameraIntrinsics& intr, const EvalConfig& cfg) {
  Keyframe kf;
  kf.image = image_tensor(ref.image);
  kf.intrinsics = intr;
  for (const Vec2& p : select_points(kf.image, cfg.max_points, cfg.point_spacing, cfg.point_border)) {
    const double z = ref.depth.at(static_cast<int>(p.y()), static_cast<int>(p.x()));
    kf.points.push_back({p, 1.0 / z});
  }
  return kf;
}

struct SplitTracks {
  std::vector<bench::RelocCandidate> candidates;
  std::vector<TrackResult> results;
};

/// Tracks every candidate of every scene from the identity pose.
inline SplitTracks track_split(const bench::Split& split, const PyramidExtractor& extract,
                               const AlignmentConfig& align, const EvalConfig& cfg = {}) {
  SplitTracks out;
  for (const auto& scene : split.scenes) {
    std::map<int, FeaturePyramid> cache;
    auto pyramid = [&](int id) -> const FeaturePyramid& {
      auto it = cache.find(id);
      if (it == cache.end()) it = cache.emplace(id, extract(image_tensor(scene.frame(id).image))).first;
      return it->second;
    };
    std::map<int, Keyframe> keyframes;
    for (const auto& c : scene.candidates) {
      auto kf = keyframes.find(c.reference_frame);
      if (kf == keyframes.end()) {
        kf = keyframes.emplace(c.reference_frame, make_keyframe(scene.frame(c.reference_frame), scene.intrinsics, cfg)).first;
      }
      out.candidates.push_back(c);
      out.results.push_back(align_pose(pyramid(c.reference_frame), pyramid(c.candidate_frame), kf->second.points,
                                       SE3Pose::identity(), scene.intrinsics, align));
      cache.erase(c.candidate_frame);
    }
  }
  return out;
}

inline bench::Evaluation evaluate_split(const bench::Split& split, const PyramidExtractor& extract,
                                        const AlignmentConfig& align, const EvalConfig& cfg = {}) {
  const SplitTracks t = track_split(split, extract, align, cfg);
  return bench::evaluate_relocalization(t.candidates, t.results);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  NetworkConfig network;
  LossConfig loss;
  AdamConfig adam;
  int epochs = 20;
  int max_frame_gap = 5;
  int pairs_per_epoch = 0;  // 0: every training pair once
  std::uint64_t seed = 1;
  bool validate = true;
  EvalConfig eval;

  void check() const {
    network.validate();
    loss.validate();
    if (epochs < 1 || max_frame_gap < 0 || pairs_per_epoch < 0 || !(adam.lr > 0)) {
      throw ConfigError("invalid training config");
    }
  }
};

struct EpochLog {
  int epoch = 0;
  double total = 0.0;
  double contrastive = 0.0;
  double gauss_newton = 0.0;
  double validation_auc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainResult {
  NetworkWeights best;
  NetworkWeights last;
  int best_epoch = 0;
  std::vector<EpochLog> log;
};

struct TrainingPair {
  const bench::SyntheticScene* scene;
  const CorrespondenceBatch* batch;
};

inline std::vector<TrainingPair> training_pairs(const bench::Split& train, int max_frame_gap) {
  std::vector<TrainingPair> out;
  for (std::size_t k = 0; k < train.scenes.size(); ++k) {
    for (const auto& b : train.pairs[k]) {
      const auto& s = train.scenes[k];
      if (std::abs(s.frame(b.frame_a).index - s.frame(b.frame_b).index) <= max_frame_gap) out.push_back({&s, &b});
    }
  }
  return out;
}

/// Loss of one pair; gradients land on the tape's leaves.
inline LossBreakdown pair_loss(tensor::Tape& tape, const NetworkWeights& net, std::span<const tensor::Var> params,
                               const TrainingPair& p, const LossConfig& loss, Rng& rng) {
  const auto& a = p.scene->frame(p.batch->frame_a);
  const auto& b = p.scene->frame(p.batch->frame_b);
  const auto fa = forward(net.config, params, tape.constant(network_input(image_tensor(a.image))));
  const auto fb = forward(net.config, params, tape.constant(network_input(image_tensor(b.image))));
  return total_loss(fa, fb, *p.batch, loss, rng);
}

inline std::string describe_pair(const TrainingPair& p) {
  std::ostringstream os;
  os << "scene seed " << p.scene->seed << " frames " << p.batch->frame_a << "/" << p.batch->frame_b;
  return os.str();
}

inline TrainResult train(const bench::Dataset& ds, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.check();
  const auto pairs = training_pairs(ds.split("train"), cfg.max_frame_gap);
  if (pairs.empty()) throw DataError("train: the training split has no pairs within the frame gap");
  const bench::Split* val = nullptr;
  if (cfg.validate) {
    val = &ds.split("val");
    std::size_t n = 0;
    for (const auto& s : val->scenes) n += s.candidates.size();
    if (n == 0) val = nullptr;
  }

  TrainResult res;
  NetworkWeights net = build_network(cfg.network);
  AdamState adam;
  Rng rng(cfg.seed);
  double best_auc = -1.0;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t steps = cfg.pairs_per_epoch > 0 ? static_cast<std::size_t>(cfg.pairs_per_epoch) : order.size();
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t s = 0; s < steps; ++s) {
      const TrainingPair& p = pairs[order[s % order.size()]];
      tensor::Tape tape;
      const auto params = register_parameters(tape, net, true);
      LossBreakdown l;
      try {
        l = pair_loss(tape, net, params, p, cfg.loss, rng);
      } catch (const DomainError& e) {
        std::ostringstream os;
        os << "train: " << e.what() << " at epoch " << epoch << " step " << s << " (" << describe_pair(p) << ")";
        throw NumericalError(os.str());
      }
      const double value = l.total.value().item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "train: non-finite loss at epoch " << epoch << " step " << s << " (" << describe_pair(p)
           << "; contrastive " << l.contrastive << ", gauss-newton " << l.gauss_newton << ")";
        throw NumericalError(os.str());
      }
      tape.backward(l.total);
      std::vector<tensor::Tensor> values = net.values();
      std::vector<tensor::Tensor> grads;
      for (const auto& v : params) grads.push_back(tape.grad(v));
      adam_step(values, grads, adam, cfg.adam);
      for (const auto& v : values) {
        if (!std::all_of(v.data().begin(), v.data().end(), [](double x) { return std::isfinite(x); })) {
          std::ostringstream os;
          os << "train: non-finite weights after epoch " << epoch << " step " << s << " (" << describe_pair(p)
             << ", lr " << cfg.adam.lr << ")";
          throw NumericalError(os.str());
        }
      }
      net.assign(values);
      log.total += value;
      log.contrastive += l.contrastive;
      log.gauss_newton += l.gauss_newton;
    }
    log.total /= static_cast<double>(steps);
    log.contrastive /= static_cast<double>(steps);
    log.gauss_newton /= static_cast<double>(steps);
    if (val) {
      log.validation_auc = evaluate_split(*val, network_extractor(net), AlignmentConfig{}, cfg.eval).summary.auc;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // without validation the last epoch is kept
    const double score = val ? log.validation_auc : static_cast<double>(epoch);
    if (score > best_auc) {
      best_auc = score;
      res.best = net;
      res.best_epoch = epoch;
    }
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  res.last = net;
  return res;
}

inline std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,total,contrastive,gauss_newton,validation_auc\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.6f\n", e.epoch, e.total, e.contrastive, e.gauss_newton,
                  e.validation_auc);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence basin

struct BasinConfig {
  int trials = 5000;
  double radius = 4.0;        // start offsets uniform in this disk, px
  double success_px = 0.5;
  double epsilon = 1e-3;
  int max_iterations = 30;
  double step_tol = 1e-3;
  int per_candidate = 40;     // correspondences drawn per candidate pair
  std::uint64_t seed = 5;
};

struct BasinResult {
  int trials = 0;
  int successes = 0;
  [[nodiscard]] double rate() const { return trials ? static_cast<double>(successes) / trials : 0.0; }
};

struct BasinTrial {
  const bench::SyntheticScene* scene;
  int frame_a;
  int frame_b;
  Vec2 target_a;  // where f_t is read
  Vec2 truth_b;
  Vec2 start_b;
};

/// Trials between each candidate and its reference frame, cycling through
/// the split until `trials` are drawn. Method independent.
inline std::vector<BasinTrial> basin_trials(const bench::Split& split, const BasinConfig& cfg) {
  std::vector<BasinTrial> out;
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::pair<const bench::SyntheticScene*, const bench::RelocCandidate*>> pool;
  for (const auto& s : split.scenes)
    for (const auto& c : s.candidates) pool.emplace_back(&s, &c);
  if (pool.empty()) throw DataError("basin: split has no candidates");
  const int border = 1;
  for (std::size_t k = 0; static_cast<int>(out.size()) < cfg.trials; ++k) {
    if (k > 20 * pool.size() + 100) throw DataError("basin: not enough correspondences");
    const auto& [scene, cand] = pool[k % pool.size()];
    CorrespondenceBatch b;
    try {
      b = bench::make_correspondences(scene->frame(cand->reference_frame), scene->frame(cand->candidate_frame),
                                      scene->intrinsics, static_cast<std::size_t>(cfg.per_candidate), 0, rng());
    } catch (const DataError&) {
      continue;
    }
    const auto& cam = scene->intrinsics;
    for (const auto& c : b.positives) {
      if (static_cast<int>(out.size()) == cfg.trials) break;
      const double r = cfg.radius * std::sqrt(unit(rng)), phi = 2.0 * M_PI * unit(rng);
      const Vec2 start = c.b + r * Vec2(std::cos(phi), std::sin(phi));
      if (!cam.in_view(start, border)) continue;
      out.push_back({scene, cand->reference_frame, cand->candidate_frame, c.a, c.b, start});
    }
  }
  return out;
}

/// Per-pixel Gauss-Newton tracking on level-0 features from each trial start.
inline BasinResult basin_experiment(std::span<const BasinTrial> trials, const PyramidExtractor& extract,
                                    const BasinConfig& cfg) {
  BasinResult res;
  std::map<std::pair<std::uint64_t, int>, FeatureMap> cache;
  auto level0 = [&](const bench::SyntheticScene* s, int id) -> const FeatureMap& {
    const auto key = std::make_pair(s->seed, id);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, extract(image_tensor(s->frame(id).image))[0]).first;
    return it->second;
  };
  for (const BasinTrial& t : trials) {
    const Eigen::VectorXd f_t = sample(level0(t.scene, t.frame_a), t.target_a);
    const PixelTrack tr = track_pixel(level0(t.scene, t.frame_b), t.start_b, f_t, cfg.epsilon, cfg.max_iterations,
                                      cfg.step_tol);
    ++res.trials;
    res.successes += !tr.lost && (tr.x - t.truth_b).norm() < cfg.success_px;
  }
  return res;
}

}  // namespace gnnet::pipeline
