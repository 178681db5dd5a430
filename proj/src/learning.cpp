#include "dualprop/learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dualprop/analysis.hpp"
#include "dualprop/rng.hpp"

namespace dualprop {

namespace {

bool all_finite(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// e * below^T, with a trailing all-ones feature column in augmented mode.
Matrix outer_with_bias(const Vector& e, const Vector& below, BiasMode bias) {
  std::size_t cols = below.size() + (bias == BiasMode::Augmented ? 1 : 0);
  Matrix out(e.size(), cols);
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = 0; j < below.size(); ++j) out(i, j) = e[i] * below[j];
    if (bias == BiasMode::Augmented) out(i, below.size()) = e[i];
  }
  return out;
}

// W^T e restricted to the state rows (the bias row has no upstream neuron).
Vector back_through(const Matrix& W, const Vector& e, std::size_t in_dim) {
  Vector full = matvec_transposed(W, e);
  full.resize(in_dim);
  return full;
}

void add_in_place(GradientEstimate& acc, const GradientEstimate& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t k = 0; k < acc.size(); ++k) {
    for (std::size_t i = 0; i < acc[k].data.size(); ++i) acc[k].data[i] += g[k].data[i];
  }
}

void scale_in_place(GradientEstimate& acc, double c) {
  for (Matrix& M : acc) {
    for (double& x : M.data) x *= c;
  }
}

}  // namespace

GradientEstimate weight_gradient(const DyadicState& state, const NetworkParams& params,
                                 const NudgeConfig& cfg) {
  params.check_consistent();
  if (state.depth() != params.depth()) {
    throw DimensionError("dyadic state depth does not match the network");
  }
  double inv_beta = -1.0 / cfg.beta;
  GradientEstimate grads;
  grads.reserve(params.depth());
  for (std::size_t k = 0; k < params.depth(); ++k) {
    Vector delta = state.delta(k + 1);
    Vector below = state.mean(k, cfg.alpha_for(std::max<std::size_t>(k, 1)));
    if (!all_finite(delta) || !all_finite(below)) {
      throw DivergedState("cannot form a gradient from a diverged dyadic state");
    }
    grads.push_back(outer_with_bias(scale(delta, inv_beta), below, params.bias));
    if (!grads.back().same_shape(params.weights[k])) {
      throw DimensionError("gradient shape does not match the weights");
    }
  }
  return grads;
}

GradientEstimate backprop_oracle(const NetworkParams& params, const Vector& x, const Vector& y,
                                 const LossKind& loss) {
  params.check_consistent();
  if (x.size() != params.input_dim()) throw DimensionError("input size mismatch");
  std::vector<Vector> preacts, states;
  forward_trace(params, x, preacts, states);
  std::size_t L = params.depth();

  Vector e = loss.unweighted_gradient(states[L - 1], y);
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] *= params.layers[L - 1].activation.derivative(preacts[L - 1][i]);
  }

  GradientEstimate grads(L);
  for (std::size_t k = L; k-- > 0;) {
    const Vector& below = k == 0 ? x : states[k - 1];
    grads[k] = outer_with_bias(e, below, params.bias);
    if (k == 0) break;
    e = back_through(params.weights[k], e, params.layers[k].in);
    for (std::size_t i = 0; i < e.size(); ++i) {
      e[i] *= params.layers[k - 1].activation.derivative(preacts[k - 1][i]);
    }
  }
  return grads;
}

GradientEstimate finite_difference_oracle(const NetworkParams& params, const Vector& x,
                                          const Vector& y, const LossKind& loss, double h) {
  params.check_consistent();
  if (!(h > 0.0)) throw std::invalid_argument("step size must be positive");
  NetworkParams probe = params;
  GradientEstimate grads;
  grads.reserve(params.depth());
  for (std::size_t k = 0; k < params.depth(); ++k) {
    Matrix g(params.weights[k].rows, params.weights[k].cols);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      double saved = probe.weights[k].data[i];
      probe.weights[k].data[i] = saved + h;
      double up = loss.unweighted_value(forward(probe, x).back(), y);
      probe.weights[k].data[i] = saved - h;
      double down = loss.unweighted_value(forward(probe, x).back(), y);
      probe.weights[k].data[i] = saved;
      g.data[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

void optimizer_step(OptimizerState& opt, NetworkParams& params, const GradientEstimate& grad) {
  if (grad.size() != params.weights.size()) {
    throw DimensionError("gradient stack does not match the parameter stack");
  }
  for (std::size_t k = 0; k < grad.size(); ++k) {
    if (!grad[k].same_shape(params.weights[k])) {
      throw DimensionError("gradient layer shape does not match its weights");
    }
  }
  if (opt.m.empty()) {
    for (const Matrix& W : params.weights) opt.m.emplace_back(W.rows, W.cols, 0.0);
    if (opt.kind == OptimizerState::Kind::Adam) {
      for (const Matrix& W : params.weights) opt.v.emplace_back(W.rows, W.cols, 0.0);
    }
  }

  ++opt.step_count;
  if (opt.kind == OptimizerState::Kind::Adam) {
    double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
    double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
    for (std::size_t k = 0; k < grad.size(); ++k) {
      for (std::size_t i = 0; i < grad[k].data.size(); ++i) {
        double g = grad[k].data[i];
        double& m = opt.m[k].data[i];
        double& v = opt.v[k].data[i];
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
        params.weights[k].data[i] -= opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.epsilon);
      }
    }
  } else {
    for (std::size_t k = 0; k < grad.size(); ++k) {
      for (std::size_t i = 0; i < grad[k].data.size(); ++i) {
        double g = grad[k].data[i] + opt.weight_decay * params.weights[k].data[i];
        double& vel = opt.m[k].data[i];
        vel = opt.momentum * vel + g;
        params.weights[k].data[i] -= opt.lr * vel;
      }
    }
  }
}

double accuracy(const NetworkParams& params, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset has no accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Vector out = forward(params, data.samples[i]).back();
    std::size_t arg = 0;
    for (std::size_t j = 1; j < out.size(); ++j) {
      if (out[j] > out[arg]) arg = j;
    }
    hits += static_cast<int>(arg) == data.labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainHistory train(const Dataset& train_set, const Dataset& test_set, NetworkParams& params,
                   const NudgeConfig& cfg, const LossKind& loss, OptimizerState& opt,
                   const TrainOptions& options) {
  if (train_set.size() == 0) throw std::invalid_argument("empty training set");
  if (options.epochs < 1) throw std::invalid_argument("need at least one epoch");
  if (options.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  params.check_consistent();
  cfg.validate(params, loss);
  if (train_set.dim() != params.input_dim()) {
    throw DimensionError("training samples do not match the input layer");
  }
  if (static_cast<std::size_t>(train_set.classes) != params.output_dim()) {
    throw DimensionError("class count does not match the output layer");
  }

  Rng shuffle_rng(options.seed);
  std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainHistory hist;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = n; i-- > 1;) {
      std::size_t j = shuffle_rng.index(i + 1);
      std::swap(order[i], order[j]);
    }

    std::size_t epoch_contributing = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < n; start += options.batch_size, ++batch_index) {
      std::size_t end = std::min(start + options.batch_size, n);
      BatchRecord rec;
      rec.epoch = epoch;
      rec.batch = batch_index;

      // The stabilized solver's damping depends only on the weights, which
      // are fixed within a batch -- compute it once here instead of once per
      // sample. Pure memoization; the values are identical.
      NudgeConfig batch_cfg = cfg;
      if (cfg.scheme == Scheme::DPStabilized &&
          cfg.damping.kind == Damping::Kind::AutoPowerIter) {
        batch_cfg.damping =
            Damping::per_layer(stabilized_damping_values(params, cfg.damping.power_steps));
      }

      bool sample_metrics = options.grad_angle_every_n_batches > 0 &&
                            batch_index % options.grad_angle_every_n_batches == 0;
      GradientEstimate grad_sum, backprop_sum;
      double loss_sum = 0.0;
      std::size_t contributing = 0;

      for (std::size_t idx = start; idx < end; ++idx) {
        const Vector& x = train_set.samples[order[idx]];
        Vector y = one_hot(train_set.labels[order[idx]], train_set.classes);
        loss_sum += loss.unweighted_value(forward(params, x).back(), y);

        InferenceReport rep = run_inference(params, x, y, batch_cfg, loss);
        if (rep.diverged) {
          ++rec.diverged_samples;
          continue;
        }
        add_in_place(grad_sum, weight_gradient(rep.state, params, cfg));
        if (sample_metrics) add_in_place(backprop_sum, backprop_oracle(params, x, y, loss));
        ++contributing;
      }

      rec.train_loss = loss_sum / static_cast<double>(end - start);
      if (contributing > 0) {
        scale_in_place(grad_sum, 1.0 / static_cast<double>(contributing));
        if (sample_metrics) {
          scale_in_place(backprop_sum, 1.0 / static_cast<double>(contributing));
          rec.grad_angle = grad_angle(grad_sum, backprop_sum);
          rec.grad_l2_diff = grad_l2_diff(grad_sum, backprop_sum);
        }
        optimizer_step(opt, params, grad_sum);
        epoch_contributing += contributing;
      }
      hist.batches.push_back(std::move(rec));
    }

    if (epoch_contributing == 0) {
      throw AbortedDiverged("inference diverged on every sample for a full epoch",
                            std::move(hist));
    }

    EpochRecord er;
    er.epoch = epoch;
    er.test_accuracy = test_set.size() > 0
                           ? accuracy(params, test_set)
                           : std::numeric_limits<double>::quiet_NaN();
    er.lipschitz = options.lipschitz_every_epoch
                       ? lipschitz_estimate(params)
                       : std::numeric_limits<double>::quiet_NaN();
    hist.epochs.push_back(er);
  }
  return hist;
}

}  // namespace dualprop
