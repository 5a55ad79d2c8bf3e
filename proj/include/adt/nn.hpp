#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adt/optim.hpp"
#include "adt/rng.hpp"
#include "adt/tensor.hpp"

namespace adt::nn {

inline Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = stddev * standard_normal(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor constant_init(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, double stddev, Rng& rng)
      : weight(normal_init({in, out}, stddev, rng)), bias(constant_init({out}, 0.0)) {}

  Tensor operator()(Tape& tape, const Tensor& x) const { return tape.add_rowwise(tape.matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma(constant_init({dim}, 1.0)), beta(constant_init({dim}, 0.0)) {}

  Tensor operator()(Tape& tape, const Tensor& x) const { return tape.layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

enum class Activation { Relu, Gelu };

// Feed-forward network: hidden layers with an activation, linear output.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::Relu;

  Mlp() = default;
  Mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng,
      Activation act = Activation::Relu)
      : activation(act) {
    std::size_t prev = in;
    for (std::size_t h : hidden) {
      layers.emplace_back(prev, h, std::sqrt(2.0 / static_cast<double>(prev)), rng);
      prev = h;
    }
    layers.emplace_back(prev, out, 1.0 / std::sqrt(static_cast<double>(prev)), rng);
  }

  Tensor operator()(Tape& tape, Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](tape, x);
      if (i + 1 < layers.size()) x = activation == Activation::Relu ? tape.relu(x) : tape.gelu(x);
    }
    return x;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

}  // namespace adt::nn
