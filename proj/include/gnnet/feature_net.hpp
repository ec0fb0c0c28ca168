#pragma once

// Siamese multi-scale encoder-decoder producing a D-channel descriptor map at
// every pyramid level.
//
// For L levels with widths w_l = base_width * 2^l:
//
//   enc_0     = act(conv3(act(conv3(image))))
//   enc_l     = act(conv3(act(conv3(avgpool(enc_{l-1})))))       l = 1..L-1
//   dec_{L-1} = enc_{L-1}
//   dec_l     = act(conv3(concat(upsample(dec_{l+1}), enc_l)))  l = L-2..0
//   F^l       = conv1(dec_l)                                      (linear head)
//
// act is ELU. 3x3 convolutions are zero padded, so F^l has extent
// (H / 2^l, W / 2^l). Both branches of the Siamese pair call the same
// forward() with the same parameter handles.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gnnet/error.hpp"
#include "gnnet/feature_map.hpp"
#include "gnnet/tensor.hpp"
#include "gnnet/weights_io.hpp"

namespace gnnet {

struct NetworkConfig {
  int input_channels = 1;
  int descriptor_dim = 8;
  int pyramid_levels = 3;
  int base_width = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (input_channels < 1 || descriptor_dim < 1 || pyramid_levels < 2 || base_width < 1 ||
        pyramid_levels > 8) {
      throw ConfigError("invalid network config: C=" + std::to_string(input_channels) +
                        " D=" + std::to_string(descriptor_dim) +
                        " L=" + std::to_string(pyramid_levels) +
                        " base_width=" + std::to_string(base_width));
    }
  }

  [[nodiscard]] int width_at(int level) const { return base_width << level; }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// One convolution layer: weight (out, in, k, k) and bias (out).
struct LayerSpec {
  std::string name;
  int out_channels;
  int in_channels;
  int kernel;
};

/// The declared layers, in parameter order.
inline std::vector<LayerSpec> network_layers(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> layers;
  const int L = cfg.pyramid_levels;
  for (int l = 0; l < L; ++l) {
    const int in = l == 0 ? cfg.input_channels : cfg.width_at(l - 1);
    const std::string p = "enc" + std::to_string(l);
    layers.push_back({p + ".conv0", cfg.width_at(l), in, 3});
    layers.push_back({p + ".conv1", cfg.width_at(l), cfg.width_at(l), 3});
  }
  for (int l = L - 2; l >= 0; --l) {
    layers.push_back({"dec" + std::to_string(l) + ".conv", cfg.width_at(l),
                      cfg.width_at(l + 1) + cfg.width_at(l), 3});
  }
  for (int l = 0; l < L; ++l) {
    layers.push_back({"head" + std::to_string(l), cfg.descriptor_dim, cfg.width_at(l), 1});
  }
  return layers;
}

struct NetworkWeights {
  NetworkConfig config;
  std::vector<NamedTensor> params;  // weight, bias per layer in network_layers() order

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  [[nodiscard]] std::vector<tensor::Tensor> values() const {
    std::vector<tensor::Tensor> v;
    v.reserve(params.size());
    for (const auto& p : params) v.push_back(p.value);
    return v;
  }

  void assign(std::span<const tensor::Tensor> values) {
    if (values.size() != params.size()) throw ShapeError("NetworkWeights::assign: count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (values[i].shape() != params[i].value.shape()) {
        throw ShapeError("NetworkWeights::assign: shape mismatch for " + params[i].name);
      }
      params[i].value = values[i];
    }
  }
};

/// He-initialized weights (normal, std sqrt(2 / fan_in)), zero biases.
inline NetworkWeights build_network(const NetworkConfig& cfg) {
  cfg.validate();
  NetworkWeights net;
  net.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  for (const LayerSpec& layer : network_layers(cfg)) {
    const auto out = static_cast<std::size_t>(layer.out_channels);
    const auto in = static_cast<std::size_t>(layer.in_channels);
    const auto k = static_cast<std::size_t>(layer.kernel);
    tensor::Tensor w({out, in, k, k});
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    for (double& v : w.data()) v = normal(rng);
    net.params.push_back({layer.name + ".weight", std::move(w)});
    net.params.push_back({layer.name + ".bias", tensor::Tensor({out}, 0.0)});
  }
  return net;
}

inline void check_image(const NetworkConfig& cfg, const tensor::Shape& shape) {
  const std::size_t div = std::size_t{1} << (cfg.pyramid_levels - 1);
  if (shape.size() != 3 || shape[0] != static_cast<std::size_t>(cfg.input_channels) ||
      shape[1] == 0 || shape[2] == 0 || shape[1] % div || shape[2] % div) {
    throw ShapeError("network input " + tensor::to_string(shape) + " must be (" +
                     std::to_string(cfg.input_channels) + ", H, W) with H, W divisible by " +
                     std::to_string(div));
  }
}

/// Puts the parameters on `tape`, as leaves when `trainable`, else constants.
inline std::vector<tensor::Var> register_parameters(tensor::Tape& tape, const NetworkWeights& net,
                                                    bool trainable) {
  std::vector<tensor::Var> vars;
  vars.reserve(net.params.size());
  for (const auto& p : net.params) {
    vars.push_back(trainable ? tape.leaf(p.value) : tape.constant(p.value));
  }
  return vars;
}

/// Taped forward pass; returns one (D, H/2^l, W/2^l) map per level.
inline std::vector<tensor::Var> forward(const NetworkConfig& cfg,
                                        std::span<const tensor::Var> params, tensor::Var image) {
  using namespace tensor;
  check_image(cfg, image.shape());
  const int L = cfg.pyramid_levels;
  if (params.size() != network_layers(cfg).size() * 2) {
    throw ShapeError("forward: parameter count does not match the network config");
  }
  std::size_t next = 0;
  auto conv = [&](Var x, std::size_t pad) {
    Var w = params[next++];
    Var b = params[next++];
    return conv2d(x, w, b, {1, pad});
  };

  std::vector<Var> enc(static_cast<std::size_t>(L));
  Var x = image;
  for (int l = 0; l < L; ++l) {
    if (l > 0) x = avg_pool2(x);
    x = elu(conv(x, 1));
    x = elu(conv(x, 1));
    enc[static_cast<std::size_t>(l)] = x;
  }
  std::vector<Var> dec(static_cast<std::size_t>(L));
  dec[static_cast<std::size_t>(L - 1)] = enc[static_cast<std::size_t>(L - 1)];
  for (int l = L - 2; l >= 0; --l) {
    Var up = upsample2_nearest(dec[static_cast<std::size_t>(l + 1)]);
    dec[static_cast<std::size_t>(l)] = elu(conv(concat_channels({up, enc[static_cast<std::size_t>(l)]}), 1));
  }
  std::vector<Var> heads;
  for (int l = 0; l < L; ++l) heads.push_back(conv(dec[static_cast<std::size_t>(l)], 0));
  return heads;
}

/// Inference: the descriptor pyramid of one (C, H, W) image.
inline FeaturePyramid extract_pyramid(const NetworkWeights& net, const tensor::Tensor& image) {
  tensor::Tape tape;
  const auto params = register_parameters(tape, net, false);
  const auto levels = forward(net.config, params, tape.constant(image));
  FeaturePyramid pyr;
  for (const auto& v : levels) pyr.levels.push_back(v.value());
  return pyr;
}

inline ParameterFile to_parameter_file(const NetworkWeights& net) {
  ParameterFile f;
  f.hyperparameters = {{"input_channels", net.config.input_channels},
                       {"descriptor_dim", net.config.descriptor_dim},
                       {"pyramid_levels", net.config.pyramid_levels},
                       {"base_width", net.config.base_width},
                       {"seed", static_cast<std::int64_t>(net.config.seed)}};
  f.parameters = net.params;
  return f;
}

inline NetworkWeights from_parameter_file(const ParameterFile& f) {
  NetworkConfig cfg;
  auto get = [&](const std::string& key) -> std::int64_t {
    for (const auto& [k, v] : f.hyperparameters)
      if (k == key) return v;
    throw DataError("weights file: missing hyperparameter '" + key + "'");
  };
  cfg.input_channels = static_cast<int>(get("input_channels"));
  cfg.descriptor_dim = static_cast<int>(get("descriptor_dim"));
  cfg.pyramid_levels = static_cast<int>(get("pyramid_levels"));
  cfg.base_width = static_cast<int>(get("base_width"));
  cfg.seed = static_cast<std::uint64_t>(get("seed"));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("weights file: ") + e.what());
  }
  NetworkWeights expected = build_network(cfg);
  if (f.parameters.size() != expected.params.size()) {
    throw DataError("weights file: parameter count does not match the stored architecture");
  }
  for (std::size_t i = 0; i < f.parameters.size(); ++i) {
    if (f.parameters[i].name != expected.params[i].name ||
        f.parameters[i].value.shape() != expected.params[i].value.shape()) {
      throw DataError("weights file: unexpected parameter '" + f.parameters[i].name + "'");
    }
  }
  expected.params = f.parameters;
  return expected;
}

inline void save_network(const std::string& path, const NetworkWeights& net) {
  save_parameter_file(path, to_parameter_file(net));
}

inline NetworkWeights load_network(const std::string& path) {
  return from_parameter_file(load_parameter_file(path));
}

}  // namespace gnnet
