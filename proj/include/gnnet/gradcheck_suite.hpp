#pragma once

// Finite-difference check of the contrastive, Gauss-Newton, and total losses
// with respect to every network weight, on a small network and image pair.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gnnet/bench/scene.hpp"
#include "gnnet/feature_net.hpp"
#include "gnnet/gradcheck.hpp"
#include "gnnet/losses.hpp"

namespace gnnet {

struct NetworkGradcheckConfig {
  int image_size = 32;
  NetworkConfig network{1, 4, 2, 4, 1};
  int positives = 6;
  int negatives = 6;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;

  void validate() const {
    network.validate();
    if (image_size < 8 || image_size % (1 << (network.pyramid_levels - 1)) != 0 || positives < 1 ||
        negatives < 0 || !(step > 0) || !(tolerance > 0)) {
      throw ConfigError("invalid gradcheck config");
    }
  }
};

struct NetworkGradcheckReport {
  std::vector<std::pair<std::string, GradcheckReport>> terms;  // contrastive, gauss_newton, total

  [[nodiscard]] double max_relative_error() const {
    double m = 0.0;
    for (const auto& [name, r] : terms) m = std::max(m, r.max_relative_error());
    return m;
  }
  [[nodiscard]] bool passed(double tolerance) const { return max_relative_error() < tolerance; }
};

/// Smooth value-noise image in [0, 1], shape (1, n, n).
inline tensor::Tensor noise_image(int n, std::uint64_t seed, double cell) {
  const bench::ValueNoise noise(seed);
  tensor::Tensor t({1, static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) t.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = noise.fractal(x, y, cell, 3);
  return t;
}

inline NetworkGradcheckReport network_gradcheck(const NetworkGradcheckConfig& cfg) {
  cfg.validate();
  const NetworkWeights net = build_network(cfg.network);
  const int n = cfg.image_size;
  const tensor::Tensor ia = noise_image(n, cfg.seed * 2 + 1, 6.0);
  const tensor::Tensor ib = noise_image(n, cfg.seed * 2 + 2, 6.0);

  Rng gen(cfg.seed);
  std::uniform_real_distribution<double> u(4.0, n - 5.0), d(-2.0, 2.0);
  CorrespondenceBatch batch;
  for (int i = 0; i < cfg.positives; ++i) {
    const Vec2 a(u(gen), u(gen));
    batch.positives.push_back({a, (a + Vec2(d(gen), d(gen))).cwiseMax(3.0).cwiseMin(n - 4.0)});
  }
  batch.negatives = sample_negatives(batch.positives, static_cast<std::size_t>(cfg.negatives), n, n, 2.0, 8.0, gen);

  NetworkGradcheckReport report;
  const std::pair<const char*, std::pair<double, double>> terms[] = {
      {"contrastive", {1.0, 0.0}}, {"gauss_newton", {0.0, 1.0}}, {"total", {1.0, 0.1}}};
  for (const auto& [name, weights] : terms) {
    LossConfig loss;
    loss.margin = weights.first;
    loss.gn_weight = weights.second;
    const std::uint64_t loss_seed = cfg.seed + 17;
    report.terms.emplace_back(
        name, gradcheck(net.params,
                        [&](tensor::Tape& tape, std::span<const tensor::Var> w) {
                          const auto fa = forward(cfg.network, w, tape.constant(ia));
                          const auto fb = forward(cfg.network, w, tape.constant(ib));
                          Rng rng(loss_seed);  // same start points on every evaluation
                          return total_loss(fa, fb, batch, loss, rng).total;
                        },
                        cfg.step));
  }
  return report;
}

}  // namespace gnnet
