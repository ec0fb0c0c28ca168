#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "gnnet/feature_net.hpp"
#include "support.hpp"

namespace gnnet {
namespace {

tensor::Tensor random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  std::mt19937_64 rng(seed);
  return test::random_tensor(rng, {1, h, w}, 0.0, 1.0);
}

TEST(Network, SameSeedGivesIdenticalWeights) {
  NetworkConfig cfg;
  cfg.seed = 42;
  const NetworkWeights a = build_network(cfg);
  const NetworkWeights b = build_network(cfg);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(a.params[i].name, b.params[i].name);
    EXPECT_EQ(a.params[i].value, b.params[i].value);
  }
  cfg.seed = 43;
  EXPECT_NE(build_network(cfg).params[0].value, a.params[0].value);
}

TEST(Network, ParameterCountAudit) {
  // C=1, D=8, L=3, base 16, widths 16/32/64, hand-summed:
  //   enc0 160 + 2320, enc1 4640 + 9248, enc2 18496 + 36928,
  //   dec1 27680, dec0 6928, heads 136 + 264 + 520
  EXPECT_EQ(build_network(NetworkConfig{}).parameter_count(), 107320u);

  NetworkConfig small{1, 4, 2, 4, 1};
  // enc0 40 + 148, enc1 296 + 584, dec0 436, heads 20 + 36
  EXPECT_EQ(build_network(small).parameter_count(), 1560u);
}

TEST(Network, RejectsInvalidConfigs) {
  EXPECT_THROW(build_network({1, 0, 3, 16, 1}), ConfigError);
  EXPECT_THROW(build_network({1, 8, 1, 16, 1}), ConfigError);
  EXPECT_THROW(build_network({0, 8, 3, 16, 1}), ConfigError);
  const NetworkWeights net = build_network({1, 4, 3, 4, 1});
  EXPECT_THROW(extract_pyramid(net, random_image(1, 30, 32)), ShapeError);
  EXPECT_THROW(extract_pyramid(net, tensor::Tensor({2, 32, 32})), ShapeError);
}

TEST(Network, DeclaredShapesAndFiniteOnZeros) {
  const NetworkWeights net = build_network(NetworkConfig{});
  const FeaturePyramid p = extract_pyramid(net, tensor::Tensor({1, 64, 64}, 0.0));
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].shape(), (tensor::Shape{8, 64, 64}));
  EXPECT_EQ(p[1].shape(), (tensor::Shape{8, 32, 32}));
  EXPECT_EQ(p[2].shape(), (tensor::Shape{8, 16, 16}));
  for (const auto& level : p.levels) {
    for (double v : level.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Network, SiameseBranchesAgree) {
  const NetworkWeights net = build_network({1, 4, 3, 6, 5});
  const auto img = random_image(2, 32, 32);
  const FeaturePyramid a = extract_pyramid(net, img);
  const FeaturePyramid b = extract_pyramid(net, img);
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_EQ(a[l], b[l]);

  // Both branches through one taped forward share the same parameter handles.
  tensor::Tape tape;
  const auto params = register_parameters(tape, net, true);
  const auto fa = forward(net.config, params, tape.constant(img));
  const auto fb = forward(net.config, params, tape.constant(img));
  for (std::size_t l = 0; l < fa.size(); ++l) EXPECT_EQ(fa[l].value(), fb[l].value());
}

// Support of one output pixel of each network stage, in input pixels along
// one axis, propagated stage by stage from the layer hyperparameters.
struct Span {
  long lo, hi;
};

class SupportOracle {
 public:
  SupportOracle(int levels, long extent) : L_(levels), extent_(extent) {}

  // enc_l is two 3x3 convs on avgpool(enc_{l-1}) (or on the image for l = 0).
  Span enc(int l, Span s) const {
    s = clamp(l, {s.lo - 2, s.hi + 2});
    if (l == 0) return clamp_input(s);
    return enc(l - 1, {2 * s.lo, 2 * s.hi + 1});
  }

  // dec_l is one 3x3 conv on concat(upsample(dec_{l+1}), enc_l).
  Span dec(int l, Span s) const {
    if (l == L_ - 1) return enc(l, s);
    const Span c = clamp(l, {s.lo - 1, s.hi + 1});
    const Span from_up = dec(l + 1, {floor_half(c.lo), floor_half(c.hi)});
    const Span from_skip = enc(l, c);
    return {std::min(from_up.lo, from_skip.lo), std::max(from_up.hi, from_skip.hi)};
  }

 private:
  static long floor_half(long v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }
  Span clamp(int l, Span s) const {
    const long n = extent_ >> l;
    return {std::max(0L, s.lo), std::min(n - 1, s.hi)};
  }
  Span clamp_input(Span s) const { return clamp(0, s); }

  int L_;
  long extent_;
};

TEST(Network, PerturbationStaysInsideReceptiveField) {
  const NetworkConfig cfg{1, 4, 3, 4, 9};
  const NetworkWeights net = build_network(cfg);
  const long n = 32;
  const auto img = random_image(3, n, n);
  const FeaturePyramid base = extract_pyramid(net, img);

  const SupportOracle oracle(cfg.pyramid_levels, n);
  for (const auto& [py, px] : {std::pair<long, long>{16, 16}, {5, 27}, {0, 0}, {31, 9}}) {
    auto poked = img;
    poked.at(0, static_cast<std::size_t>(py), static_cast<std::size_t>(px)) += 0.5;
    const FeaturePyramid p = extract_pyramid(net, poked);
    long max_reach = 0;
    for (long y = 0; y < n; ++y) {
      for (long x = 0; x < n; ++x) {
        const Span sy = oracle.dec(0, {y, y});
        const Span sx = oracle.dec(0, {x, x});
        const bool inside = sy.lo <= py && py <= sy.hi && sx.lo <= px && px <= sx.hi;
        double change = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
          change = std::max(change, std::abs(p[0].at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) -
                                             base[0].at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x))));
        }
        if (!inside) {
          EXPECT_EQ(change, 0.0) << "output (" << y << "," << x << ") moved by pixel (" << py << "," << px << ")";
        } else if (change > 0.0) {
          max_reach = std::max({max_reach, std::abs(y - py), std::abs(x - px)});
        }
      }
    }
    EXPECT_GT(max_reach, 4) << "change should travel beyond the level-0 convs";
  }
}

TEST(Network, WeightsFileRoundTrip) {
  const NetworkWeights net = build_network({1, 4, 2, 4, 17});
  std::stringstream ss;
  write_parameter_file(ss, to_parameter_file(net));
  const NetworkWeights back = from_parameter_file(read_parameter_file(ss));
  EXPECT_EQ(back.config, net.config);
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    EXPECT_EQ(back.params[i].value, net.params[i].value);
  }

  ParameterFile wrong = to_parameter_file(net);
  wrong.parameters[3].name = "bogus";
  EXPECT_THROW(from_parameter_file(wrong), DataError);
  ParameterFile missing = to_parameter_file(net);
  missing.hyperparameters.pop_back();
  EXPECT_THROW(from_parameter_file(missing), DataError);
}

}  // namespace
}  // namespace gnnet
