#pragma once

// Dataset generation and its on-disk form.
//
//   <root>/manifest.json
//   <root>/<split>/scene_NNN/frame_NNNN.pgm     8-bit P5 image
//   <root>/<split>/scene_NNN/frame_NNNN.depth   u32 w, u32 h, w*h f64 (LE)
//   <root>/<split>/scene_NNN/pairs.txt          frame_a frame_b u_a v_a u_b v_b pos|neg
//
// The manifest records the format version, generator version, config, seeds,
// per-frame pose (4x4 row-major), condition id, and a CRC-32 per file.

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "gnnet/bench/correspondences.hpp"
#include "gnnet/bench/scene.hpp"
#include "gnnet/error.hpp"
#include "gnnet/weights_io.hpp"

#ifndef GNNET_VERSION
#define GNNET_VERSION "0.1.0-unknown"
#endif

namespace gnnet::bench {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr const char* kDatasetFormat = "gnnet-dataset";

struct DatasetConfig {
  SceneConfig scene;
  std::uint64_t seed = 1;
  int train_scenes = 3;
  int val_scenes = 1;
  int test_scenes = 4;
  int train_candidates = 0;   // per training scene
  int pairs_per_scene = 40;   // training pairs
  int positives = 64;
  int negatives = 64;
  int max_frame_gap = 5;

  void validate() const {
    scene.validate();
    if (train_scenes < 0 || val_scenes < 0 || test_scenes < 0 || train_candidates < 0 || pairs_per_scene < 0 ||
        positives < 1 || negatives < 0 || max_frame_gap < 0) {
      throw ConfigError("invalid dataset config");
    }
  }
};

struct Split {
  std::string name;
  std::vector<SyntheticScene> scenes;
  std::vector<std::vector<CorrespondenceBatch>> pairs;  // per scene
};

struct Dataset {
  DatasetConfig config;
  std::string version = GNNET_VERSION;
  std::vector<Split> splits;

  [[nodiscard]] const Split& split(const std::string& name) const {
    for (const auto& s : splits) {
      if (s.name == name) return s;
    }
    throw DataError("dataset has no split '" + name + "'");
  }
};

inline std::uint64_t split_seed(std::uint64_t base, int split_index, int scene_index) {
  return detail::mix_seed(base, static_cast<std::uint64_t>(split_index) * 100000 + static_cast<std::uint64_t>(scene_index));
}

/// Training pairs: frames of any sequence whose trajectory indices differ by
/// at most max_frame_gap.
inline std::vector<CorrespondenceBatch> sample_training_pairs(const SyntheticScene& scene, const DatasetConfig& cfg,
                                                              std::uint64_t seed) {
  std::vector<const Frame*> stream;
  for (const Frame& f : scene.frames) {
    if (f.sequence >= 0) stream.push_back(&f);
  }
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, stream.size() - 1);
  std::vector<CorrespondenceBatch> out;
  for (int attempt = 0; static_cast<int>(out.size()) < cfg.pairs_per_scene; ++attempt) {
    if (attempt > 50 * cfg.pairs_per_scene + 100) throw DataError("cannot find enough overlapping training pairs");
    const Frame& a = *stream[pick(rng)];
    const Frame& b = *stream[pick(rng)];
    if (a.id == b.id || std::abs(a.index - b.index) > cfg.max_frame_gap) continue;
    try {
      out.push_back(make_correspondences(a, b, scene.intrinsics, static_cast<std::size_t>(cfg.positives),
                                         static_cast<std::size_t>(cfg.negatives), rng()));
    } catch (const DataError&) {
    }
  }
  return out;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const std::pair<const char*, int> layout[] = {
      {"train", cfg.train_scenes}, {"val", cfg.val_scenes}, {"test", cfg.test_scenes}};
  for (int s = 0; s < 3; ++s) {
    Split split;
    split.name = layout[s].first;
    SceneConfig sc = cfg.scene;
    if (s == 0) sc.candidates = cfg.train_candidates;
    for (int k = 0; k < layout[s].second; ++k) {
      const std::uint64_t seed = split_seed(cfg.seed, s, k);
      split.scenes.push_back(generate_scene(seed, sc));
      split.pairs.push_back(s == 0 ? sample_training_pairs(split.scenes.back(), cfg, detail::mix_seed(seed, 7))
                                   : std::vector<CorrespondenceBatch>{});
    }
    ds.splits.push_back(std::move(split));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSON echo of the configuration

inline nlohmann::json to_json(const ConditionTransform& c) {
  return {{"gamma", c.gamma},           {"brightness", c.brightness},   {"contrast", c.contrast},
          {"noise_sigma", c.noise_sigma}, {"blur_radius", c.blur_radius}, {"gain", c.gain}};
}

inline ConditionTransform condition_from_json(const nlohmann::json& j) {
  ConditionTransform c;
  c.gamma = j.at("gamma").get<double>();
  c.brightness = j.at("brightness").get<double>();
  c.contrast = j.at("contrast").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.blur_radius = j.at("blur_radius").get<double>();
  c.gain = j.at("gain").get<double>();
  return c;
}

inline nlohmann::json to_json(const SceneConfig& c) {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& t : c.conditions) conds.push_back(to_json(t));
  return {{"width", c.width},
          {"height", c.height},
          {"focal", c.focal},
          {"surface_distance", c.surface_distance},
          {"relief", c.relief},
          {"relief_scale", c.relief_scale},
          {"relief_octaves", c.relief_octaves},
          {"texture_scale", c.texture_scale},
          {"texture_octaves", c.texture_octaves},
          {"frames", c.frames},
          {"frame_step", c.frame_step},
          {"sequence_jitter", c.sequence_jitter},
          {"rotation_jitter", c.rotation_jitter},
          {"conditions", conds},
          {"candidates", c.candidates},
          {"candidate_max_translation", c.candidate_max_translation},
          {"candidate_max_rotation", c.candidate_max_rotation},
          {"min_overlap", c.min_overlap},
          {"march_step", c.march_step},
          {"pyramid_levels", c.pyramid_levels}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.focal = j.at("focal").get<double>();
  c.surface_distance = j.at("surface_distance").get<double>();
  c.relief = j.at("relief").get<double>();
  c.relief_scale = j.at("relief_scale").get<double>();
  c.relief_octaves = j.at("relief_octaves").get<int>();
  c.texture_scale = j.at("texture_scale").get<double>();
  c.texture_octaves = j.at("texture_octaves").get<int>();
  c.frames = j.at("frames").get<int>();
  c.frame_step = j.at("frame_step").get<double>();
  c.sequence_jitter = j.at("sequence_jitter").get<double>();
  c.rotation_jitter = j.at("rotation_jitter").get<double>();
  c.conditions.clear();
  for (const auto& t : j.at("conditions")) c.conditions.push_back(condition_from_json(t));
  c.candidates = j.at("candidates").get<int>();
  c.candidate_max_translation = j.at("candidate_max_translation").get<double>();
  c.candidate_max_rotation = j.at("candidate_max_rotation").get<double>();
  c.min_overlap = j.at("min_overlap").get<double>();
  c.march_step = j.at("march_step").get<double>();
  c.pyramid_levels = j.at("pyramid_levels").get<int>();
  return c;
}

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"scene", to_json(c.scene)},
          {"seed", c.seed},
          {"train_scenes", c.train_scenes},
          {"val_scenes", c.val_scenes},
          {"test_scenes", c.test_scenes},
          {"train_candidates", c.train_candidates},
          {"pairs_per_scene", c.pairs_per_scene},
          {"positives", c.positives},
          {"negatives", c.negatives},
          {"max_frame_gap", c.max_frame_gap}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.scene = scene_config_from_json(j.at("scene"));
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_scenes = j.at("train_scenes").get<int>();
  c.val_scenes = j.at("val_scenes").get<int>();
  c.test_scenes = j.at("test_scenes").get<int>();
  c.train_candidates = j.at("train_candidates").get<int>();
  c.pairs_per_scene = j.at("pairs_per_scene").get<int>();
  c.positives = j.at("positives").get<int>();
  c.negatives = j.at("negatives").get<int>();
  c.max_frame_gap = j.at("max_frame_gap").get<int>();
  return c;
}

inline nlohmann::json pose_json(const SE3Pose& p) {
  const Mat4 m = p.matrix();
  nlohmann::json a = nlohmann::json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

inline SE3Pose pose_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 16) throw DataError("pose must be 16 numbers");
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = j[static_cast<std::size_t>(4 * r + c)].get<double>();
  return SE3Pose::from_matrix(m);
}

// ---------------------------------------------------------------------------
// File formats

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string encode_pgm(const Image8& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline Image8 decode_pgm(const std::string& bytes, const std::string& path) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw VersionError(path + ": not a binary PGM (bad magic)");
  std::istringstream is(bytes.substr(2, 64));
  int w = 0, h = 0, maxval = 0;
  if (!(is >> w >> h >> maxval) || w <= 0 || h <= 0 || maxval != 255) throw DataError(path + ": bad PGM header");
  const auto header = static_cast<std::size_t>(is.tellg()) + 2 + 1;  // one whitespace after maxval
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() < header + n) throw TruncatedError(path + ": PGM pixel data truncated");
  if (bytes.size() > header + n) throw DataError(path + ": trailing bytes after PGM data");
  Image8 img{w, h, std::vector<std::uint8_t>(n)};
  std::memcpy(img.pixels.data(), bytes.data() + header, n);
  return img;
}

inline std::string encode_depth(const DepthMap& d) {
  std::ostringstream os;
  gnnet::detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.width));
  gnnet::detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.height));
  for (double v : d.values) gnnet::detail::put_le<double>(os, v);
  return os.str();
}

inline DepthMap decode_depth(const std::string& bytes, const std::string& path) {
  if (bytes.size() < 8) throw TruncatedError(path + ": depth header truncated");
  std::istringstream is(bytes);
  DepthMap d;
  d.width = static_cast<int>(gnnet::detail::get_le<std::uint32_t>(is, "depth width"));
  d.height = static_cast<int>(gnnet::detail::get_le<std::uint32_t>(is, "depth height"));
  const auto n = static_cast<std::size_t>(d.width) * static_cast<std::size_t>(d.height);
  if (bytes.size() < 8 + 8 * n) throw TruncatedError(path + ": depth values truncated");
  if (bytes.size() > 8 + 8 * n) throw DataError(path + ": trailing bytes after depth values");
  d.values.resize(n);
  for (double& v : d.values) v = gnnet::detail::get_le<double>(is, "depth value");
  return d;
}

inline std::string encode_pairs(const std::vector<CorrespondenceBatch>& pairs) {
  std::string out;
  char buf[256];
  for (const auto& b : pairs) {
    for (int neg = 0; neg < 2; ++neg) {
      for (const auto& c : neg ? b.negatives : b.positives) {
        std::snprintf(buf, sizeof buf, "%d %d %.17g %.17g %.17g %.17g %s\n", b.frame_a, b.frame_b, c.a.x(), c.a.y(),
                      c.b.x(), c.b.y(), neg ? "neg" : "pos");
        out += buf;
      }
    }
  }
  return out;
}

/// Consecutive lines with the same frame pair form one batch.
inline std::vector<CorrespondenceBatch> decode_pairs(const std::string& text, const SyntheticScene& scene,
                                                     const std::string& path) {
  std::vector<CorrespondenceBatch> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    int fa = 0, fb = 0;
    double ua = 0, va = 0, ub = 0, vb = 0;
    std::string label;
    if (!(ls >> fa >> fb >> ua >> va >> ub >> vb >> label) || (label != "pos" && label != "neg") || fa < 0 ||
        fb < 0 || fa >= static_cast<int>(scene.frames.size()) || fb >= static_cast<int>(scene.frames.size())) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed correspondence line");
    }
    if (out.empty() || out.back().frame_a != fa || out.back().frame_b != fb) {
      CorrespondenceBatch b;
      b.frame_a = fa;
      b.frame_b = fb;
      b.inter_sequence = scene.frame(fa).condition != scene.frame(fb).condition;
      out.push_back(std::move(b));
    }
    (label == "pos" ? out.back().positives : out.back().negatives).push_back({Vec2(ua, va), Vec2(ub, vb)});
  }
  return out;
}

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError("cannot write " + p.string());
  }
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string scene_dir(const std::string& split, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03zu", k);
  return split + "/" + buf;
}

inline std::string frame_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d", id);
  return buf;
}

}  // namespace detail

/// Writes `ds` under `root`, creating directories as needed.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  nlohmann::json manifest;
  manifest["format"] = kDatasetFormat;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["version"] = ds.version;
  manifest["config"] = to_json(ds.config);
  manifest["splits"] = nlohmann::json::array();
  for (const Split& split : ds.splits) {
    nlohmann::json js{{"name", split.name}, {"scenes", nlohmann::json::array()}};
    for (std::size_t k = 0; k < split.scenes.size(); ++k) {
      const SyntheticScene& scene = split.scenes[k];
      const std::string dir = detail::scene_dir(split.name, k);
      nlohmann::json jsc{{"seed", scene.seed}, {"directory", dir}, {"frames", nlohmann::json::array()},
                         {"candidates", nlohmann::json::array()}};
      for (const Frame& f : scene.frames) {
        const std::string img = dir + "/" + detail::frame_stem(f.id) + ".pgm";
        const std::string dep = dir + "/" + detail::frame_stem(f.id) + ".depth";
        const std::string img_bytes = encode_pgm(f.image), dep_bytes = encode_depth(f.depth);
        detail::write_file(root / img, img_bytes);
        detail::write_file(root / dep, dep_bytes);
        jsc["frames"].push_back({{"id", f.id},
                                 {"sequence", f.sequence},
                                 {"index", f.index},
                                 {"condition", f.condition},
                                 {"pose", pose_json(f.pose)},
                                 {"image", img},
                                 {"image_crc32", crc32_of(img_bytes)},
                                 {"depth", dep},
                                 {"depth_crc32", crc32_of(dep_bytes)}});
      }
      for (const RelocCandidate& c : scene.candidates) {
        jsc["candidates"].push_back({{"candidate", c.candidate_frame},
                                     {"reference", c.reference_frame},
                                     {"relative_pose", pose_json(c.relative_pose)}});
      }
      const std::string pairs_path = dir + "/pairs.txt";
      const std::string pairs = encode_pairs(split.pairs[k]);
      detail::write_file(root / pairs_path, pairs);
      jsc["pairs"] = pairs_path;
      jsc["pairs_crc32"] = crc32_of(pairs);
      js["scenes"].push_back(std::move(jsc));
    }
    manifest["splits"].push_back(std::move(js));
  }
  detail::write_file(root / "manifest.json", manifest.dump(1) + "\n");
}

namespace detail {

inline void verify_crc(const std::string& bytes, const nlohmann::json& entry, const char* crc_key,
                       const std::string& path) {
  if (crc32_of(bytes) != entry.at(crc_key).get<std::uint32_t>()) throw ChecksumError(path + ": checksum mismatch");
}

}  // namespace detail

/// Reads a dataset written by write_dataset. Splits not listed in `only`
/// (when nonempty) are skipped.
inline Dataset read_dataset(const std::filesystem::path& root, const std::vector<std::string>& only = {}) {
  nlohmann::json manifest;
  {
    const std::string text = detail::read_file(root / "manifest.json");
    try {
      manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError((root / "manifest.json").string() + ": " + e.what());
    }
  }
  try {
    if (manifest.value("format", "") != kDatasetFormat) throw VersionError("manifest: not a gnnet dataset");
    const int fv = manifest.at("format_version").get<int>();
    if (fv != kDatasetFormatVersion) {
      throw VersionError("manifest: format version " + std::to_string(fv) + ", expected " +
                         std::to_string(kDatasetFormatVersion));
    }
    Dataset ds;
    ds.version = manifest.at("version").get<std::string>();
    ds.config = dataset_config_from_json(manifest.at("config"));
    for (const auto& js : manifest.at("splits")) {
      Split split;
      split.name = js.at("name").get<std::string>();
      const bool wanted = only.empty() || std::find(only.begin(), only.end(), split.name) != only.end();
      if (!wanted) continue;
      for (const auto& jsc : js.at("scenes")) {
        SyntheticScene scene;
        scene.seed = jsc.at("seed").get<std::uint64_t>();
        scene.config = ds.config.scene;
        if (split.name == "train") scene.config.candidates = ds.config.train_candidates;
        scene.intrinsics = scene.config.intrinsics();
        for (const auto& jf : jsc.at("frames")) {
          Frame f;
          f.id = jf.at("id").get<int>();
          if (f.id != static_cast<int>(scene.frames.size())) throw DataError("manifest: frame ids out of order");
          f.sequence = jf.at("sequence").get<int>();
          f.index = jf.at("index").get<int>();
          f.condition = jf.at("condition").get<int>();
          f.pose = pose_from_json(jf.at("pose"));
          const std::string ip = (root / jf.at("image").get<std::string>()).string();
          const std::string ib = detail::read_file(ip);
          f.image = decode_pgm(ib, ip);
          detail::verify_crc(ib, jf, "image_crc32", ip);
          const std::string dp = (root / jf.at("depth").get<std::string>()).string();
          const std::string db = detail::read_file(dp);
          f.depth = decode_depth(db, dp);
          detail::verify_crc(db, jf, "depth_crc32", dp);
          if (f.image.width != scene.intrinsics.width || f.image.height != scene.intrinsics.height ||
              f.depth.width != scene.intrinsics.width || f.depth.height != scene.intrinsics.height) {
            throw DataError(ip + ": size does not match the configured camera");
          }
          scene.frames.push_back(std::move(f));
        }
        for (const auto& jc : jsc.at("candidates")) {
          RelocCandidate c;
          c.candidate_frame = jc.at("candidate").get<int>();
          c.reference_frame = jc.at("reference").get<int>();
          c.relative_pose = pose_from_json(jc.at("relative_pose"));
          scene.candidates.push_back(c);
        }
        const std::string pp = (root / jsc.at("pairs").get<std::string>()).string();
        const std::string pb = detail::read_file(pp);
        detail::verify_crc(pb, jsc, "pairs_crc32", pp);
        split.pairs.push_back(decode_pairs(pb, scene, pp));
        split.scenes.push_back(std::move(scene));
      }
      ds.splits.push_back(std::move(split));
    }
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((root / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace gnnet::bench
