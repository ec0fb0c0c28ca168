#pragma once

// Central finite-difference verification of taped gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gnnet/tensor.hpp"
#include "gnnet/weights_io.hpp"

namespace gnnet {

/// |a - n| / max(|a|, |n|, 1e-6)
inline double gradient_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradcheckBlock {
  std::string name;
  std::size_t entries = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckBlock> blocks;

  [[nodiscard]] double max_relative_error() const {
    double m = 0.0;
    for (const auto& b : blocks) m = std::max(m, b.max_relative_error);
    return m;
  }
  [[nodiscard]] bool passed(double tolerance) const { return max_relative_error() < tolerance; }
};

/// Builds the scalar loss on a fresh tape from leaf handles of `inputs`.
using LossBuilder = std::function<tensor::Var(tensor::Tape&, std::span<const tensor::Var>)>;

/// Compares the taped gradient of `build` against central differences with
/// the given step, for every entry of every input block. The builder must be
/// a deterministic function of the input values.
inline GradcheckReport gradcheck(std::vector<NamedTensor> inputs, const LossBuilder& build,
                                 double step = 1e-5) {
  auto evaluate = [&](bool with_grad, std::vector<tensor::Tensor>* grads) {
    tensor::Tape tape;
    std::vector<tensor::Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in.value));
    tensor::Var loss = build(tape, leaves);
    const double v = loss.value().item();
    if (with_grad) {
      tape.backward(loss);
      for (const auto& leaf : leaves) grads->push_back(tape.grad(leaf));
    }
    return v;
  };

  std::vector<tensor::Tensor> analytic;
  evaluate(true, &analytic);

  GradcheckReport report;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    GradcheckBlock block{inputs[b].name, inputs[b].value.size(), 0.0, 0.0};
    for (std::size_t i = 0; i < inputs[b].value.size(); ++i) {
      double& x = inputs[b].value[i];
      const double saved = x;
      x = saved + step;
      const double plus = evaluate(false, nullptr);
      x = saved - step;
      const double minus = evaluate(false, nullptr);
      x = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[b][i];
      block.max_relative_error = std::max(block.max_relative_error, gradient_relative_error(a, numeric));
      block.max_abs_gradient = std::max(block.max_abs_gradient, std::abs(a));
    }
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace gnnet
