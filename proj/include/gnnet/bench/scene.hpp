#pragma once

// Procedural relocalization scenes: a value-noise heightfield Z = Z0 + h(X, Y)
// with a value-noise albedo, seen by a camera looking along +Z. Each scene
// holds several sequences (one trajectory rendered under one photometric
// condition each) plus relocalization candidates rendered at perturbed poses
// near frames of sequence 0.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/geometry.hpp"

namespace gnnet::bench {

/// Photometric stand-in for weather and lighting.
///
///   v = contrast * (255 * gain * a^gamma - 127.5) + 127.5 + brightness
///
/// on albedo a in [0, 1], then a Gaussian blur (sigma = blur_radius px),
/// additive Gaussian noise, clamping to [0, 255] and rounding.
struct ConditionTransform {
  double gamma = 1.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  double blur_radius = 0.0;
  double gain = 1.0;  // 1x1 color matrix of a single-channel image

  friend bool operator==(const ConditionTransform&, const ConditionTransform&) = default;
};

inline std::vector<ConditionTransform> default_conditions() {
  return {
      {},
      {1.5, 30.0, 1.0, 2.0, 0.0, 1.0},
      {0.6, -30.0, 0.6, 3.0, 1.0, 1.0},
      {1.0, 60.0, 1.3, 2.0, 1.5, 1.0},
  };
}

struct SceneConfig {
  int width = 64;
  int height = 64;
  double focal = 64.0;
  double surface_distance = 4.0;  // Z0, metres
  double relief = 0.6;            // heightfield amplitude
  double relief_scale = 3.0;      // lattice cell of the coarsest relief octave
  int relief_octaves = 4;
  double texture_scale = 0.6;  // lattice cell of the coarsest albedo octave
  int texture_octaves = 3;
  int frames = 10;             // per sequence
  double frame_step = 0.2;     // metres between consecutive frames
  double sequence_jitter = 0.1;  // per-sequence trajectory offset, metres
  double rotation_jitter = 0.03;  // radians
  std::vector<ConditionTransform> conditions = default_conditions();
  int candidates = 60;
  double candidate_max_translation = 1.0;
  double candidate_max_rotation = 0.1;
  double min_overlap = 0.5;
  double march_step = 0.03;
  int pyramid_levels = 3;

  [[nodiscard]] CameraIntrinsics intrinsics() const {
    return {focal, focal, (width - 1) * 0.5, (height - 1) * 0.5, width, height};
  }

  void validate() const {
    if (width < 8 || height < 8 || !(focal > 0) || !(surface_distance > relief) || !(relief >= 0) ||
        !(relief_scale > 0) || relief_octaves < 1 || !(texture_scale > 0) || texture_octaves < 1 ||
        conditions.empty() || candidates < 0 || !(candidate_max_translation >= 0) ||
        !(candidate_max_rotation >= 0) || !(min_overlap >= 0 && min_overlap <= 1) ||
        !(march_step > 0) || !(frame_step >= 0)) {
      throw ConfigError("invalid scene config");
    }
    if (pyramid_levels < 1 || width % (1 << (pyramid_levels - 1)) != 0 ||
        height % (1 << (pyramid_levels - 1)) != 0) {
      throw ConfigError("scene config: image size must be divisible by 2^(levels-1)");
    }
    if (frames < 1) throw ConfigError("scene config: frames must be >= 1, got " + std::to_string(frames));
    // consecutive frames must share most of their view
    const double footprint = surface_distance * width / focal;
    if (frame_step > 0.5 * footprint) {
      throw ConfigError("scene config: frame_step leaves consecutive frames without overlap");
    }
    for (const auto& c : conditions) {
      if (!(c.gamma > 0) || !(c.contrast > 0) || !(c.noise_sigma >= 0) || !(c.blur_radius >= 0) ||
          !(c.gain > 0)) {
        throw ConfigError("scene config: invalid condition transform");
      }
    }
  }
};

/// 8-bit single-channel image.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  [[nodiscard]] std::uint8_t at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

/// Camera-frame Z per pixel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major

  [[nodiscard]] double at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  friend bool operator==(const DepthMap&, const DepthMap&) = default;
};

struct Frame {
  int id = 0;
  int sequence = 0;   // -1 for relocalization candidates
  int index = 0;      // position in its sequence
  int condition = 0;
  SE3Pose pose;       // camera to world
  Image8 image;
  DepthMap depth;
};

struct RelocCandidate {
  int candidate_frame = 0;
  int reference_frame = 0;
  SE3Pose relative_pose;  // reference camera -> candidate camera
};

/// Deterministic value noise on an integer lattice.
class ValueNoise {
 public:
  explicit ValueNoise(std::uint64_t seed) : seed_(seed) {}

  [[nodiscard]] double lattice(std::int64_t ix, std::int64_t iy) const {
    std::uint64_t h = seed_ ^ (static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL) ^
                      (static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL);
    // splitmix64 finalizer
    h += 0x9E3779B97F4A7C15ULL;
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
    h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
    h ^= h >> 31;
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  /// Smooth (C2) interpolation of the lattice, values in [0, 1].
  [[nodiscard]] double operator()(double x, double y) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double sx = fade(x - fx), sy = fade(y - fy);
    const double a = lattice(ix, iy), b = lattice(ix + 1, iy);
    const double c = lattice(ix, iy + 1), d = lattice(ix + 1, iy + 1);
    return (a + (b - a) * sx) * (1 - sy) + (c + (d - c) * sx) * sy;
  }

  /// Octave sum normalized to [0, 1]; octave k has cell size cell / 2^k.
  [[nodiscard]] double fractal(double x, double y, double cell, int octaves) const {
    double sum = 0.0, norm = 0.0, amp = 1.0, freq = 1.0 / cell;
    for (int k = 0; k < octaves; ++k) {
      sum += amp * ValueNoise(seed_ + 0x51ED27ULL * static_cast<std::uint64_t>(k + 1))(x * freq, y * freq);
      norm += amp;
      amp *= 0.5;
      freq *= 2.0;
    }
    return sum / norm;
  }

 private:
  static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
  std::uint64_t seed_;
};

/// Scene geometry and albedo, fully determined by the seed.
class Terrain {
 public:
  Terrain(std::uint64_t seed, const SceneConfig& cfg)
      : cfg_(cfg), relief_(seed * 2 + 1), albedo_(seed * 2 + 2) {}

  [[nodiscard]] double height(double X, double Y) const {
    return cfg_.surface_distance +
           cfg_.relief * (2.0 * relief_.fractal(X, Y, cfg_.relief_scale, cfg_.relief_octaves) - 1.0);
  }

  [[nodiscard]] double albedo(double X, double Y) const {
    const double v = albedo_.fractal(X, Y, cfg_.texture_scale, cfg_.texture_octaves);
    // stretch the fractal's narrow central distribution
    return std::clamp(0.5 + 1.3 * (v - 0.5), 0.0, 1.0);
  }

  /// Depth (camera Z) of the first surface hit through `pixel`, or nullopt.
  [[nodiscard]] std::optional<double> raycast(const SE3Pose& cam_to_world, const CameraIntrinsics& intr,
                                              const Vec2& pixel) const {
    const Vec3 d = cam_to_world.rotation * intr.unproject(pixel, 1.0);  // camera depth t <-> point C + t d
    const Vec3& C = cam_to_world.translation;
    if (!(d.z() > 1e-6)) return std::nullopt;
    auto f = [&](double t) {
      const Vec3 p = C + t * d;
      return p.z() - height(p.x(), p.y());
    };
    const double lo_z = cfg_.surface_distance - cfg_.relief, hi_z = cfg_.surface_distance + cfg_.relief;
    double t0 = std::max(1e-3, (lo_z - C.z()) / d.z() - cfg_.march_step);
    const double t1 = (hi_z - C.z()) / d.z() + cfg_.march_step;
    double f0 = f(t0);
    if (f0 >= 0.0) return std::nullopt;  // camera inside the relief band
    for (double t = t0 + cfg_.march_step; t <= t1; t += cfg_.march_step) {
      const double ft = f(t);
      if (ft >= 0.0) {
        double a = t0, b = t;
        for (int i = 0; i < 60; ++i) {
          const double m = 0.5 * (a + b);
          (f(m) < 0.0 ? a : b) = m;
        }
        return 0.5 * (a + b);
      }
      t0 = t;
      f0 = ft;
    }
    return std::nullopt;
  }

 private:
  SceneConfig cfg_;
  ValueNoise relief_;
  ValueNoise albedo_;
};

namespace detail {

inline std::vector<double> gaussian_blur(const std::vector<double>& img, int w, int h, double sigma) {
  if (sigma <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x); };
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img[idx(y, std::clamp(x + i, 0, w - 1))];
      tmp[idx(y, x)] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[idx(std::clamp(y + i, 0, h - 1), x)];
      out[idx(y, x)] = acc;
    }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
  h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
  return h ^ (h >> 31);
}

}  // namespace detail

/// Applies a condition to an albedo image in [0, 1].
inline Image8 apply_condition(const std::vector<double>& albedo, int w, int h,
                              const ConditionTransform& c, std::uint64_t noise_seed) {
  std::vector<double> v(albedo.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = c.contrast * (255.0 * c.gain * std::pow(albedo[i], c.gamma) - 127.5) + 127.5 + c.brightness;
  }
  v = detail::gaussian_blur(v, w, h, c.blur_radius);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Image8 out{w, h, std::vector<std::uint8_t>(v.size())};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double n = c.noise_sigma > 0 ? c.noise_sigma * noise(rng) : 0.0;
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i] + n, 0.0, 255.0)));
  }
  return out;
}

struct RenderedView {
  std::vector<double> albedo;
  DepthMap depth;
};

inline RenderedView render_view(const Terrain& terrain, const SE3Pose& cam_to_world,
                                const CameraIntrinsics& intr) {
  RenderedView v;
  v.depth = {intr.width, intr.height, std::vector<double>(static_cast<std::size_t>(intr.width * intr.height))};
  v.albedo.resize(v.depth.values.size());
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      const auto i = static_cast<std::size_t>(y * intr.width + x);
      const auto t = terrain.raycast(cam_to_world, intr, Vec2(x, y));
      if (!t) throw ConfigError("scene: a camera ray misses the surface; reduce relief or rotation");
      const Vec3 p = cam_to_world * intr.unproject(Vec2(x, y), *t);
      v.depth.values[i] = *t;
      v.albedo[i] = terrain.albedo(p.x(), p.y());
    }
  }
  return v;
}

struct SyntheticScene {
  std::uint64_t seed = 0;
  SceneConfig config;
  CameraIntrinsics intrinsics;
  std::vector<Frame> frames;
  std::vector<RelocCandidate> candidates;

  [[nodiscard]] Terrain terrain() const { return Terrain(seed, config); }
  [[nodiscard]] const Frame& frame(int id) const { return frames.at(static_cast<std::size_t>(id)); }
  [[nodiscard]] int sequence_count() const { return static_cast<int>(config.conditions.size()); }
};

/// Fraction of a grid of reference pixels whose surface point projects into
/// the other view with the default border.
inline double view_overlap(const DepthMap& ref_depth, const SE3Pose& ref_to_other,
                           const CameraIntrinsics& intr) {
  int in = 0, total = 0;
  for (int y = 2; y < ref_depth.height - 2; y += 4) {
    for (int x = 2; x < ref_depth.width - 2; x += 4) {
      ++total;
      in += project({Vec2(x, y), 1.0 / ref_depth.at(y, x)}, ref_to_other, intr).has_value();
    }
  }
  return total ? static_cast<double>(in) / total : 0.0;
}

/// Generates one scene. Deterministic in (seed, config).
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  SyntheticScene scene;
  scene.seed = seed;
  scene.config = cfg;
  scene.intrinsics = cfg.intrinsics();
  const Terrain terrain = scene.terrain();
  std::mt19937_64 rng(detail::mix_seed(seed, 1));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  const double heading = unit(rng) * M_PI;
  const Vec3 dir(std::cos(heading), std::sin(heading), 0.0);
  const Vec3 origin(unit(rng) * 50.0, unit(rng) * 50.0, 0.0);

  auto small_rotation = [&](double max_angle) {
    Vec6 tw = Vec6::Zero();
    tw.tail<3>() = Vec3(unit(rng), unit(rng), unit(rng)) * max_angle;
    return se3_exp(tw).rotation;
  };

  for (int s = 0; s < static_cast<int>(cfg.conditions.size()); ++s) {
    Vec3 offset = Vec3::Zero();
    if (s > 0) offset = Vec3(unit(rng), unit(rng), 0.3 * unit(rng)) * cfg.sequence_jitter;
    for (int i = 0; i < cfg.frames; ++i) {
      Frame f;
      f.id = static_cast<int>(scene.frames.size());
      f.sequence = s;
      f.index = i;
      f.condition = s;
      f.pose.rotation = small_rotation(cfg.rotation_jitter);
      f.pose.translation = origin + dir * (cfg.frame_step * i) + offset;
      scene.frames.push_back(std::move(f));
    }
  }

  auto render = [&](Frame& f) {
    RenderedView v = render_view(terrain, f.pose, scene.intrinsics);
    f.depth = std::move(v.depth);
    f.image = apply_condition(v.albedo, cfg.width, cfg.height,
                              cfg.conditions[static_cast<std::size_t>(f.condition)],
                              detail::mix_seed(seed, 1000 + static_cast<std::uint64_t>(f.id)));
  };
  for (Frame& f : scene.frames) render(f);
  for (int i = 1; i < cfg.frames; ++i) {
    const Frame& a = scene.frames[static_cast<std::size_t>(i - 1)];
    const Frame& b = scene.frames[static_cast<std::size_t>(i)];
    if (view_overlap(a.depth, b.pose.inverse() * a.pose, scene.intrinsics) < cfg.min_overlap) {
      throw ConfigError("scene: consecutive frames " + std::to_string(i - 1) + " and " + std::to_string(i) +
                        " do not overlap");
    }
  }

  std::uniform_int_distribution<int> pick_ref(0, cfg.frames - 1);
  std::uniform_int_distribution<int> pick_cond(cfg.conditions.size() > 1 ? 1 : 0,
                                               static_cast<int>(cfg.conditions.size()) - 1);
  for (int k = 0; k < cfg.candidates; ++k) {
    RelocCandidate c;
    c.reference_frame = pick_ref(rng);
    const Frame& ref = scene.frames[static_cast<std::size_t>(c.reference_frame)];
    Frame f;
    f.id = static_cast<int>(scene.frames.size());
    f.sequence = -1;
    f.index = k;
    f.condition = pick_cond(rng);
    for (int attempt = 0;; ++attempt) {
      if (attempt == 100) throw ConfigError("scene: cannot place a candidate with enough overlap");
      Vec3 t(unit(rng), unit(rng), unit(rng));
      while (t.norm() > 1.0) t = Vec3(unit(rng), unit(rng), unit(rng));
      SE3Pose perturb;
      perturb.translation = t * cfg.candidate_max_translation;
      perturb.rotation = small_rotation(cfg.candidate_max_rotation / std::sqrt(3.0));
      f.pose = ref.pose * perturb;
      c.relative_pose = f.pose.inverse() * ref.pose;
      if (view_overlap(ref.depth, c.relative_pose, scene.intrinsics) >= cfg.min_overlap) break;
    }
    c.candidate_frame = f.id;
    render(f);
    scene.frames.push_back(std::move(f));
    scene.candidates.push_back(c);
  }
  return scene;
}

}  // namespace gnnet::bench
