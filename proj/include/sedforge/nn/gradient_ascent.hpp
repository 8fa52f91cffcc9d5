#pragma once

#include <cmath>
#include <random>

#include "sedforge/error.hpp"
#include "sedforge/nn/network.hpp"
#include "sedforge/random.hpp"

namespace sedforge::nn {

struct AscentOptions {
  std::size_t steps = 100;
  double step_size = 0.1;
  std::size_t frames = 32;  // width of the synthesized input pattern
  std::uint64_t seed = 0;
};

struct AscentResult {
  Tensor<double> pattern;  // [F, frames]
  double initial_activation = 0.0;
  double final_activation = 0.0;
  std::size_t accepted_steps = 0;
};

/// Pre-activation response (after batch norm, before ReLU) of feature map
/// `unit` of conv block `conv_layer`, read at the centre of the map.
template <class S>
double unit_activation(Network<S>& net, std::size_t conv_layer, std::size_t unit,
                       const Tensor<S>& input, Tensor<S>* input_grad = nullptr) {
  const std::size_t end = net.conv_response_end(conv_layer);
  const Tensor<S> out = net.forward_partial(input, end, {Mode::Inference, 0, false});
  const std::size_t fc = out.dim(2) / 2, tc = out.dim(3) / 2;
  const double value = out.at(0, unit, fc, tc);
  if (input_grad) {
    Tensor<S> g(out.shape());
    g.at(0, unit, fc, tc) = S(1);
    *input_grad = net.backward_partial(g, end);
  }
  return value;
}

/// Synthesizes the input that maximally excites one convolutional unit.
/// Starts from i.i.d. N(0, 1) noise and takes `steps` updates of size
/// step_size along the unit-norm gradient; an update that would lower the
/// activation is rejected and the step size halved.
inline AscentResult input_gradient_ascent(const Network<float>& trained, std::size_t conv_layer,
                                          std::size_t unit, const AscentOptions& opt = {}) {
  const NetworkSpec& spec = trained.spec();
  if (conv_layer >= spec.count_conv())
    throw ConfigError("conv layer " + std::to_string(conv_layer) + " out of range (network has " +
                      std::to_string(spec.count_conv()) + ")");
  std::size_t maps = 0, seen = 0;
  for (const auto& l : spec.layers)
    if (const auto* c = std::get_if<ConvSpec>(&l); c && seen++ == conv_layer) maps = c->maps;
  if (unit >= maps)
    throw ConfigError("unit " + std::to_string(unit) + " out of range (layer has " +
                      std::to_string(maps) + " maps)");
  if (opt.frames == 0) throw ConfigError("pattern needs at least one frame");

  Network<double> net = trained.cast<double>();
  const std::size_t F = spec.input_bands, T = opt.frames;
  Tensor<double> x({1, F, T});
  Rng rng(derive_seed(opt.seed, {conv_layer, unit}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : x.values()) v = normal(rng);

  AscentResult res;
  Tensor<double> grad;
  double current = unit_activation(net, conv_layer, unit, x, &grad);
  res.initial_activation = current;
  double step = opt.step_size;
  for (std::size_t i = 0; i < opt.steps; ++i) {
    double norm = 0;
    for (double g : grad.values()) norm += g * g;
    norm = std::sqrt(norm);
    if (norm == 0) break;
    Tensor<double> candidate = x;
    for (std::size_t j = 0; j < x.size(); ++j) candidate[j] += step * grad[j] / norm;
    Tensor<double> cand_grad;
    const double value = unit_activation(net, conv_layer, unit, candidate, &cand_grad);
    if (value >= current) {
      x = std::move(candidate);
      grad = std::move(cand_grad);
      current = value;
      ++res.accepted_steps;
    } else {
      step *= 0.5;
    }
  }
  res.final_activation = current;
  x.reshape({F, T});
  res.pattern = std::move(x);
  return res;
}

}  // namespace sedforge::nn
