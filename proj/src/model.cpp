#include "dualprop/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dualprop/rng.hpp"

namespace dualprop {

double ActivationKind::apply(double x) const {
  switch (kind) {
    case Kind::Identity: return x;
    case Kind::Relu: return x > 0.0 ? x : 0.0;
    case Kind::LeakyRelu: return x > 0.0 ? x : slope * x;
    case Kind::HardSigmoid: return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
  }
  return x;
}

double ActivationKind::project(double x) const {
  switch (kind) {
    case Kind::Identity: return x;
    case Kind::Relu: return x > 0.0 ? x : 0.0;
    case Kind::LeakyRelu: return x;  // C is the whole line
    case Kind::HardSigmoid: return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
  }
  return x;
}

double ActivationKind::derivative(double x) const {
  switch (kind) {
    case Kind::Identity: return 1.0;
    case Kind::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Kind::LeakyRelu: return x > 0.0 ? 1.0 : slope;
    case Kind::HardSigmoid: return (x > 0.0 && x < 1.0) ? 1.0 : 0.0;
  }
  return 1.0;
}

bool ActivationKind::feasible(double x, double tol) const {
  switch (kind) {
    case Kind::Identity:
    case Kind::LeakyRelu: return true;
    case Kind::Relu: return x >= -tol;
    case Kind::HardSigmoid: return x >= -tol && x <= 1.0 + tol;
  }
  return true;
}

std::string ActivationKind::tag() const {
  switch (kind) {
    case Kind::Identity: return "identity";
    case Kind::Relu: return "relu";
    case Kind::LeakyRelu: {
      std::ostringstream os;
      os << "leaky-relu:" << slope;
      return os.str();
    }
    case Kind::HardSigmoid: return "hard-sigmoid";
  }
  return "identity";
}

ActivationKind ActivationKind::from_tag(const std::string& tag) {
  if (tag == "identity") return identity();
  if (tag == "relu") return relu();
  if (tag == "hard-sigmoid") return hard_sigmoid();
  if (tag.rfind("leaky-relu", 0) == 0) {
    double s = 0.01;
    auto colon = tag.find(':');
    if (colon != std::string::npos) s = std::stod(tag.substr(colon + 1));
    if (!(s > 0.0 && s <= 1.0))
      throw UnsupportedActivation("leaky-relu slope must be in (0,1]: " + tag);
    return leaky_relu(s);
  }
  throw UnsupportedActivation("unknown activation tag: " + tag);
}

Vector activation_apply(const ActivationKind& f, const Vector& x) {
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f.apply(x[i]);
  return y;
}

Vector activation_project(const ActivationKind& f, const Vector& x) {
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f.project(x[i]);
  return y;
}

void NetworkParams::check_consistent() const {
  if (layers.size() != weights.size())
    throw DimensionError("params: layer/weight count mismatch");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (weights[k].rows != layers[k].out || weights[k].cols != weight_cols(k))
      throw DimensionError("params: weight shape mismatch at layer " + std::to_string(k));
    if (k + 1 < layers.size() && layers[k].out != layers[k + 1].in)
      throw DimensionError("params: adjacent layer widths disagree at layer " + std::to_string(k));
  }
}

NetworkParams init_weights(const std::vector<LayerSpec>& layers, std::uint64_t seed,
                           BiasMode bias) {
  NetworkParams p;
  p.layers = layers;
  p.bias = bias;
  Rng rng(seed);
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& spec = layers[k];
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
    Matrix W(spec.out, spec.in + (bias == BiasMode::Augmented ? 1 : 0));
    for (std::size_t i = 0; i < spec.out; ++i)
      for (std::size_t j = 0; j < spec.in; ++j) W(i, j) = rng.uniform(-bound, bound);
    // augmented column (bias) stays zero
    p.weights.push_back(std::move(W));
  }
  p.check_consistent();
  return p;
}

Vector layer_preactivation(const NetworkParams& params, std::size_t k, const Vector& input) {
  const Matrix& W = params.weights[k];
  if (params.bias == BiasMode::Off) return matvec(W, input);
  Vector aug(input);
  aug.push_back(1.0);
  return matvec(W, aug);
}

void forward_trace(const NetworkParams& params, const Vector& x,
                   std::vector<Vector>& preacts, std::vector<Vector>& states) {
  params.check_consistent();
  if (x.size() != params.input_dim()) throw DimensionError("forward: input size mismatch");
  preacts.clear();
  states.clear();
  const Vector* cur = &x;
  for (std::size_t k = 0; k < params.depth(); ++k) {
    preacts.push_back(layer_preactivation(params, k, *cur));
    states.push_back(activation_apply(params.layers[k].activation, preacts.back()));
    cur = &states.back();
  }
}

std::vector<Vector> forward(const NetworkParams& params, const Vector& x) {
  std::vector<Vector> preacts, states;
  forward_trace(params, x, preacts, states);
  return states;
}

// ---- checkpoints ----

namespace {

void write_f64_le(std::ostream& os, const double* src, std::size_t count) {
  static_assert(sizeof(double) == 8);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(count * 8));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char b[8];
      std::memcpy(b, &src[i], 8);
      for (int j = 7; j >= 0; --j) os.put(static_cast<char>(b[j]));
    }
  }
}

void read_f64_le(std::istream& is, double* dst, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * 8));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char b[8], r[8];
      is.read(reinterpret_cast<char*>(b), 8);
      for (int j = 0; j < 8; ++j) r[j] = b[7 - j];
      std::memcpy(&dst[i], r, 8);
    }
  }
}

}  // namespace

void save_checkpoint(const NetworkParams& params, const std::string& path) {
  params.check_consistent();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open for writing: " + path);
  os << "DUALPROP v1\n" << params.depth() << "\n";
  const bool aug = params.bias == BiasMode::Augmented;
  for (const auto& layer : params.layers)
    os << layer.in << " " << layer.out << " " << layer.activation.tag()
       << (aug ? "+bias" : "") << "\n";
  for (const auto& W : params.weights) write_f64_le(os, W.data.data(), W.data.size());
  if (!os) throw CheckpointError("write failed: " + path);
}

NetworkParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  std::string magic;
  std::getline(is, magic);
  if (magic != "DUALPROP v1") throw CheckpointError("bad checkpoint header: " + path);
  std::size_t count = 0;
  is >> count;
  if (!is || count == 0) throw CheckpointError("bad layer count: " + path);

  NetworkParams p;
  bool any_bias = false, all_bias = true;
  for (std::size_t k = 0; k < count; ++k) {
    LayerSpec spec;
    std::string tag;
    is >> spec.in >> spec.out >> tag;
    if (!is) throw CheckpointError("truncated layer table: " + path);
    bool bias = false;
    if (tag.size() > 5 && tag.substr(tag.size() - 5) == "+bias") {
      bias = true;
      tag = tag.substr(0, tag.size() - 5);
    }
    any_bias |= bias;
    all_bias &= bias;
    spec.activation = ActivationKind::from_tag(tag);
    p.layers.push_back(spec);
  }
  if (any_bias && !all_bias) throw CheckpointError("mixed bias tags: " + path);
  p.bias = any_bias ? BiasMode::Augmented : BiasMode::Off;
  is.get();  // consume the newline before the payload
  for (std::size_t k = 0; k < count; ++k) {
    Matrix W(p.layers[k].out, p.layers[k].in + (any_bias ? 1 : 0));
    read_f64_le(is, W.data.data(), W.data.size());
    if (!is) throw CheckpointError("truncated weight payload: " + path);
    p.weights.push_back(std::move(W));
  }
  p.check_consistent();
  return p;
}

}  // namespace dualprop
