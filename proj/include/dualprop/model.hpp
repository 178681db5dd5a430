#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dualprop/linalg.hpp"

namespace dualprop {

struct UnsupportedActivation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A neuron nonlinearity together with the two dual views the solvers need:
// the forward map f and the projection onto the feasible set C of the
// underlying potential G(s) = ||s||^2/2 + indicator(C). For identity, relu
// and hard-sigmoid, f *is* that projection; leaky-relu is invertible instead
// (its potential is piecewise quadratic), so it supports the plain updates
// but not the projection-based damped solver.
struct ActivationKind {
  enum class Kind { Identity, Relu, LeakyRelu, HardSigmoid };

  Kind kind = Kind::Identity;
  double slope = 0.01;  // leaky-relu only, in (0, 1]

  static ActivationKind identity() { return {Kind::Identity, 0.0}; }
  static ActivationKind relu() { return {Kind::Relu, 0.0}; }
  static ActivationKind leaky_relu(double s) { return {Kind::LeakyRelu, s}; }
  static ActivationKind hard_sigmoid() { return {Kind::HardSigmoid, 0.0}; }

  double apply(double x) const;
  double project(double x) const;     // Pi_C
  double derivative(double x) const;  // sub-derivative used by the oracles
  bool feasible(double x, double tol = 1e-12) const;  // x in C?

  // true iff G = ||.||^2/2 + indicator(C), i.e. f == Pi_C
  bool quadratic_indicator() const { return kind != Kind::LeakyRelu; }

  std::string tag() const;  // "identity" | "relu" | "leaky-relu:<slope>" | "hard-sigmoid"
  static ActivationKind from_tag(const std::string& tag);
};

Vector activation_apply(const ActivationKind& f, const Vector& x);
Vector activation_project(const ActivationKind& f, const Vector& x);

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  ActivationKind activation;
};

enum class BiasMode { Off, Augmented };

// A stack of affine layers. With BiasMode::Augmented each weight matrix has
// one extra trailing column that multiplies a constant-1 feature appended to
// the layer input; state vectors themselves are never augmented.
struct NetworkParams {
  std::vector<LayerSpec> layers;
  std::vector<Matrix> weights;  // weights[k]: layers[k].out x (layers[k].in [+1])
  BiasMode bias = BiasMode::Off;

  std::size_t depth() const { return layers.size(); }
  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out; }
  std::size_t weight_cols(std::size_t k) const {
    return layers[k].in + (bias == BiasMode::Augmented ? 1 : 0);
  }
  void check_consistent() const;  // throws DimensionError on shape drift
};

// Glorot-uniform initialization: entries uniform in +-sqrt(6/(in+out)),
// drawn layer by layer from a single seeded stream. Augmented bias columns
// start at zero.
NetworkParams init_weights(const std::vector<LayerSpec>& layers, std::uint64_t seed,
                           BiasMode bias = BiasMode::Off);

// Pre-activation of layer k (0-based weight index) given that layer's input.
Vector layer_preactivation(const NetworkParams& params, std::size_t k, const Vector& input);

// Plain forward pass; returns the states of layers 1..L (index 0 = layer 1).
std::vector<Vector> forward(const NetworkParams& params, const Vector& x);
// Same, but also exposes pre-activations (needed by the gradient oracles).
void forward_trace(const NetworkParams& params, const Vector& x,
                   std::vector<Vector>& preacts, std::vector<Vector>& states);

// ---- checkpoints ----
//
// Layout: text header, then raw little-endian f64 weight payload.
//
//   DUALPROP v1
//   <layer count>
//   <in> <out> <activation tag>      (one line per layer; tag gets a "+bias"
//                                     suffix in augmented mode)
//   <weights, row-major, layer 0 first>

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const NetworkParams& params, const std::string& path);
NetworkParams load_checkpoint(const std::string& path);

}  // namespace dualprop
