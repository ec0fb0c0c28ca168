#pragma once

// Training losses on taped descriptor maps: the pixelwise contrastive loss,
// the probabilistic Gauss-Newton loss, and their multi-scale weighted sum.

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/feature_map.hpp"
#include "gnnet/geometry.hpp"
#include "gnnet/tensor.hpp"

namespace gnnet {

using Rng = std::mt19937_64;

struct Correspondence {
  Vec2 a = Vec2::Zero();  // pixel in image a
  Vec2 b = Vec2::Zero();  // pixel in image b
};

struct CorrespondenceBatch {
  int frame_a = -1;
  int frame_b = -1;
  bool inter_sequence = false;
  std::vector<Correspondence> positives;
  std::vector<Correspondence> negatives;
};

struct LossConfig {
  double margin = 1.0;           // M; 0 disables the contrastive term
  double gn_weight = 1.0;        // lambda
  double vicinity_radius = 4.0;         // start-point radius in each level's own px
  std::vector<double> vicinity_levels;  // per-level radii, finest first; the last entry repeats
  double epsilon = 1e-3;
  std::vector<int> levels_used;  // empty: every level
  int gn_starts = 1;             // random start points per correspondence

  void validate() const {
    if (!(margin >= 0.0) || !(gn_weight >= 0.0) || !(epsilon > 0.0) || !(vicinity_radius >= 1.0) ||
        gn_starts < 1) {
      throw ConfigError("invalid loss config");
    }
    for (double v : vicinity_levels) {
      if (!(v >= 1.0)) throw ConfigError("invalid loss config: vicinity below 1 px");
    }
  }

  [[nodiscard]] double vicinity_at(int level) const {
    if (!vicinity_levels.empty()) {
      return vicinity_levels[std::min(static_cast<std::size_t>(level), vicinity_levels.size() - 1)];
    }
    return vicinity_radius;
  }
};

/// The 2-D Gaussian defined by one per-pixel Gauss-Newton system.
struct GaussianBelief {
  Vec2 mean = Vec2::Zero();
  Mat2 hessian = Mat2::Identity();  // inverse covariance

  /// 1/2 (x - mean)^T H (x - mean)
  [[nodiscard]] double e1(const Vec2& x) const {
    const Vec2 d = x - mean;
    return 0.5 * d.dot(hessian * d);
  }
  /// log(2 pi) - 1/2 log |H|
  [[nodiscard]] double e2() const {
    return std::log(2.0 * std::numbers::pi) - 0.5 * std::log(hessian.determinant());
  }
  [[nodiscard]] double negative_log_likelihood(const Vec2& x) const { return e1(x) + e2(); }
};

/// Gauss-Newton belief from a start point: H = J^T J + eps I, b = J^T r,
/// mean = x_s - H^-1 b.
inline GaussianBelief gauss_newton_belief(const Eigen::MatrixX2d& J, const Eigen::VectorXd& r,
                                          const Vec2& start, double epsilon) {
  GaussianBelief g;
  g.hessian = J.transpose() * J + epsilon * Mat2::Identity();
  const Vec2 b = J.transpose() * r;
  g.mean = start - g.hessian.inverse() * b;
  return g;
}

namespace detail {

inline tensor::Tensor coordinates(std::span<const Vec2> pts, double scale) {
  tensor::Tensor t({pts.size(), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t[2 * i] = pts[i].x() * scale;
    t[2 * i + 1] = pts[i].y() * scale;
  }
  return t;
}

/// As coordinates(), clamped to the sampling domain of a (., H, W) map. Points
/// valid at level 0 can land up to a fraction of a pixel outside a coarse grid.
inline tensor::Tensor coordinates_in(std::span<const Vec2> pts, double scale, const tensor::Shape& map) {
  tensor::Tensor t = coordinates(pts, scale);
  const double xmax = static_cast<double>(map.at(2)) - 1.0, ymax = static_cast<double>(map.at(1)) - 1.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t[2 * i] = std::clamp(t[2 * i], 0.0, xmax);
    t[2 * i + 1] = std::clamp(t[2 * i + 1], 0.0, ymax);
  }
  return t;
}

inline double level_scale(int level) { return 1.0 / static_cast<double>(1 << level); }

}  // namespace detail

/// Per-correspondence terms of the Gauss-Newton loss.
struct GnTerms {
  tensor::Var e1;    // (N)
  tensor::Var e2;    // (N)
  tensor::Var mean;  // (N, 2, 1)
};

/// Algorithm-1 arithmetic on a batch: J (N, D, 2) descriptor derivatives at
/// the start points, r (N, D) residuals, start (N, 2) and truth (N, 2) pixel
/// positions. Every step is taped, so gradients reach J and r.
inline GnTerms gauss_newton_terms(tensor::Var J, tensor::Var r, const tensor::Tensor& start,
                                  const tensor::Tensor& truth, double epsilon) {
  using namespace tensor;
  Tape& tape = *J.tape();
  const std::size_t N = J.shape().at(0), D = J.shape().at(1);
  if (J.shape().size() != 3 || J.shape()[2] != 2 || r.shape() != Shape{N, D} ||
      start.shape() != Shape{N, 2} || truth.shape() != Shape{N, 2}) {
    throw ShapeError("gauss_newton_terms: J " + to_string(J.shape()) + " r " + to_string(r.shape()));
  }
  Tensor eps_eye({N, 2, 2}, 0.0);
  Tensor start_col({N, 2, 1});
  Tensor offset({N, 2, 1});  // truth - start
  for (std::size_t i = 0; i < N; ++i) {
    eps_eye[4 * i] = epsilon;
    eps_eye[4 * i + 3] = epsilon;
    for (std::size_t k = 0; k < 2; ++k) {
      start_col[2 * i + k] = start[2 * i + k];
      offset[2 * i + k] = truth[2 * i + k] - start[2 * i + k];
    }
  }
  Var Jt = transpose_last2(J);                                    // (N, 2, D)
  Var H = add(bmm(Jt, J), tape.constant(std::move(eps_eye)));     // (N, 2, 2)
  Var b = bmm(Jt, reshape(r, {N, D, 1}));                         // (N, 2, 1)
  Var step = bmm(inv2x2(H), b);                                   // H^-1 b
  Var mean = sub(tape.constant(std::move(start_col)), step);      // x_s - H^-1 b
  Var d = add(tape.constant(std::move(offset)), step);            // truth - mean
  Var quad = bmm(transpose_last2(d), bmm(H, d));                  // (N, 1, 1)
  Var e1 = scale(reshape(quad, {N}), 0.5);
  Var e2 = add_scalar(scale(log(det2x2(H)), -0.5), std::log(2.0 * std::numbers::pi));
  return {e1, e2, mean};
}

/// Pixelwise contrastive loss at one level. Coordinates in the batch are
/// level-0 pixels and are divided by 2^level.
inline tensor::Var contrastive_loss(tensor::Var fa, tensor::Var fb, const CorrespondenceBatch& batch,
                                    double margin, int level = 0) {
  using namespace tensor;
  if (batch.positives.empty() && batch.negatives.empty()) {
    throw ConfigError("contrastive_loss: batch has neither positives nor negatives");
  }
  Tape& tape = *fa.tape();
  const double s = gnnet::detail::level_scale(level);
  auto split = [](const std::vector<Correspondence>& cs, bool first) {
    std::vector<Vec2> v;
    v.reserve(cs.size());
    for (const auto& c : cs) v.push_back(first ? c.a : c.b);
    return v;
  };
  auto squared_distance = [&](const std::vector<Correspondence>& cs) {
    Var da = bilinear_sample(fa, tape.constant(gnnet::detail::coordinates_in(split(cs, true), s, fa.shape())));
    Var db = bilinear_sample(fb, tape.constant(gnnet::detail::coordinates_in(split(cs, false), s, fb.shape())));
    Var diff = sub(da, db);
    return sum_last(mul(diff, diff));  // (N)
  };

  std::vector<Var> terms;
  if (!batch.positives.empty()) {
    Var dsq = squared_distance(batch.positives);
    terms.push_back(scale(sum(dsq), 1.0 / static_cast<double>(batch.positives.size())));
  }
  if (!batch.negatives.empty()) {
    Var dist = tensor::sqrt(squared_distance(batch.negatives));
    Var hinge = relu(add_scalar(scale(dist, -1.0), margin));
    terms.push_back(scale(sum(mul(hinge, hinge)), 1.0 / static_cast<double>(batch.negatives.size())));
  }
  return terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
}

/// Draws the start points x_s = u_b + U[-r, r]^2 for one level, clamped so
/// the central-difference stencil stays inside the map.
inline std::vector<Vec2> draw_start_points(std::span<const Correspondence> positives, int level,
                                           std::size_t width, std::size_t height,
                                           const LossConfig& cfg, Rng& rng) {
  const double s = gnnet::detail::level_scale(level);
  const double radius = cfg.vicinity_at(level);
  std::uniform_real_distribution<double> offset(-radius, radius);
  std::vector<Vec2> starts;
  starts.reserve(positives.size() * static_cast<std::size_t>(cfg.gn_starts));
  for (const auto& c : positives) {
    for (int k = 0; k < cfg.gn_starts; ++k) {
      const double ox = offset(rng);
      const double oy = offset(rng);
      Vec2 x(c.b.x() * s + ox, c.b.y() * s + oy);
      x.x() = std::clamp(x.x(), 1.0, static_cast<double>(width) - 2.0);
      x.y() = std::clamp(x.y(), 1.0, static_cast<double>(height) - 2.0);
      starts.push_back(x);
    }
  }
  return starts;
}

struct GnLoss {
  tensor::Var loss;    // mean of e1 + e2
  double mean_e1 = 0;  // diagnostics
  double mean_e2 = 0;
};

/// Gauss-Newton loss at one level, averaged over positives (and start points).
inline GnLoss gauss_newton_loss(tensor::Var fa, tensor::Var fb,
                                std::span<const Correspondence> positives, const LossConfig& cfg,
                                int level, Rng& rng) {
  using namespace tensor;
  cfg.validate();
  if (positives.empty()) throw ConfigError("gauss_newton_loss: needs at least one positive");
  if (fb.shape().size() != 3) throw ShapeError("gauss_newton_loss: feature map must be (D,H,W)");
  Tape& tape = *fa.tape();
  const std::size_t D = fb.shape()[0], H = fb.shape()[1], W = fb.shape()[2];
  const double s = gnnet::detail::level_scale(level);

  const std::vector<Vec2> starts = draw_start_points(positives, level, W, H, cfg, rng);
  const std::size_t N = starts.size();
  std::vector<Vec2> ua, ub;
  ua.reserve(N);
  ub.reserve(N);
  for (const auto& c : positives) {
    for (int k = 0; k < cfg.gn_starts; ++k) {
      ua.push_back(c.a);
      ub.push_back(c.b);
    }
  }
  auto shifted = [&](double dx, double dy) {
    std::vector<Vec2> v(starts);
    for (auto& x : v) x += Vec2(dx, dy);
    return tape.constant(gnnet::detail::coordinates(v, 1.0));
  };

  Var f_t = bilinear_sample(fa, tape.constant(gnnet::detail::coordinates_in(ua, s, fa.shape())));  // target feature
  Var f_s = bilinear_sample(fb, shifted(0.0, 0.0));
  Var r = sub(f_s, f_t);
  Var jx = scale(sub(bilinear_sample(fb, shifted(1.0, 0.0)), bilinear_sample(fb, shifted(-1.0, 0.0))), 0.5);
  Var jy = scale(sub(bilinear_sample(fb, shifted(0.0, 1.0)), bilinear_sample(fb, shifted(0.0, -1.0))), 0.5);
  Var J = concat({reshape(jx, {N, D, 1}), reshape(jy, {N, D, 1})}, 2);

  const GnTerms terms = gauss_newton_terms(J, r, gnnet::detail::coordinates(starts, 1.0),
                                           gnnet::detail::coordinates(ub, s), cfg.epsilon);
  for (double e : terms.e1.value().data()) {
    if (!(e >= 0.0)) throw NumericalError("gauss_newton_loss: negative or NaN e1");
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  GnLoss out;
  out.loss = scale(sum(add(terms.e1, terms.e2)), inv_n);
  for (double e : terms.e1.value().data()) out.mean_e1 += e * inv_n;
  for (double e : terms.e2.value().data()) out.mean_e2 += e * inv_n;
  return out;
}

struct LossBreakdown {
  tensor::Var total;
  double contrastive = 0.0;  // summed over levels
  double gauss_newton = 0.0;  // summed over levels, unweighted
};

/// Sum over levels of contrastive(l) + lambda * gauss_newton(l).
inline LossBreakdown total_loss(std::span<const tensor::Var> pyramid_a,
                                std::span<const tensor::Var> pyramid_b,
                                const CorrespondenceBatch& batch, const LossConfig& cfg, Rng& rng) {
  cfg.validate();
  if (pyramid_a.size() != pyramid_b.size() || pyramid_a.empty()) {
    throw ShapeError("total_loss: pyramids differ in depth");
  }
  std::vector<int> levels = cfg.levels_used;
  if (levels.empty()) {
    for (int l = 0; l < static_cast<int>(pyramid_a.size()); ++l) levels.push_back(l);
  }
  const bool use_contrastive = cfg.margin > 0.0;
  const bool use_gn = cfg.gn_weight > 0.0;
  if (!use_contrastive && !use_gn) throw ConfigError("total_loss: both loss terms disabled");

  LossBreakdown out;
  std::vector<tensor::Var> terms;
  for (int l : levels) {
    if (l < 0 || l >= static_cast<int>(pyramid_a.size())) {
      throw ConfigError("total_loss: level " + std::to_string(l) + " not available");
    }
    const auto& fa = pyramid_a[static_cast<std::size_t>(l)];
    const auto& fb = pyramid_b[static_cast<std::size_t>(l)];
    if (use_contrastive) {
      tensor::Var c = contrastive_loss(fa, fb, batch, cfg.margin, l);
      out.contrastive += c.value().item();
      terms.push_back(c);
    }
    if (use_gn) {
      GnLoss g = gauss_newton_loss(fa, fb, batch.positives, cfg, l, rng);
      out.gauss_newton += g.loss.value().item();
      terms.push_back(tensor::scale(g.loss, cfg.gn_weight));
    }
  }
  tensor::Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = tensor::add(total, terms[i]);
  out.total = total;
  return out;
}

/// Non-matches: for each positive (cycled), a uniform pixel of image b farther
/// than `min_distance` from the true match.
inline std::vector<Correspondence> sample_negatives(std::span<const Correspondence> positives,
                                                    std::size_t count, int width, int height,
                                                    double border, double min_distance, Rng& rng) {
  if (positives.empty()) throw ConfigError("sample_negatives: no positives to pair with");
  std::uniform_real_distribution<double> ux(border, width - 1.0 - border);
  std::uniform_real_distribution<double> uy(border, height - 1.0 - border);
  std::vector<Correspondence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Correspondence& p = positives[i % positives.size()];
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("sample_negatives: image too small for exclusion zone");
      const Vec2 cand(ux(rng), uy(rng));
      if ((cand - p.b).norm() > min_distance) {
        out.push_back({p.a, cand});
        break;
      }
    }
  }
  return out;
}

}  // namespace gnnet
