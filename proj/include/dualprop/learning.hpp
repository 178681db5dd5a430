#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualprop/dataset.hpp"
#include "dualprop/inference.hpp"
#include "dualprop/linalg.hpp"
#include "dualprop/loss.hpp"
#include "dualprop/model.hpp"

namespace dualprop {

// Per-layer weight gradients, aligned with NetworkParams::weights (including
// the bias column in augmented mode).
using GradientEstimate = std::vector<Matrix>;

struct DivergedState : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Contrastive gradient read off a settled dyadic state:
//   g_k = -(1/beta) * delta_{k+1} * mean_k^T
// with mean_k the alpha-weighted layer mean (the input for k = 0) and the
// trailing bias entry fixed at 1 in augmented mode. The sign and 1/beta scale
// make the weak-nudge limit converge to the plain gradient of the unweighted
// loss. Non-finite states are rejected as DivergedState.
GradientEstimate weight_gradient(const DyadicState& state, const NetworkParams& params,
                                 const NudgeConfig& cfg);

// Exact reverse-mode gradient of the unweighted loss (beta factored out).
// Sub-derivative conventions live in ActivationKind::derivative.
GradientEstimate backprop_oracle(const NetworkParams& params, const Vector& x, const Vector& y,
                                 const LossKind& loss);

// Central differences on every weight entry, same unweighted-loss convention.
GradientEstimate finite_difference_oracle(const NetworkParams& params, const Vector& x,
                                          const Vector& y, const LossKind& loss,
                                          double h = 1e-5);

// ---- optimizers ----

struct OptimizerState {
  enum class Kind { Adam, SgdMomentum };

  Kind kind = Kind::Adam;
  double lr = 0.001;
  // adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // sgd with momentum
  double momentum = 0.9;
  double weight_decay = 0.0;

  long step_count = 0;
  // adam first/second moments; sgd uses m as its velocity buffer
  std::vector<Matrix> m, v;

  static OptimizerState adam(double lr) {
    OptimizerState o;
    o.kind = Kind::Adam;
    o.lr = lr;
    return o;
  }
  static OptimizerState sgd_momentum(double lr, double momentum = 0.9,
                                     double weight_decay = 0.0) {
    OptimizerState o;
    o.kind = Kind::SgdMomentum;
    o.lr = lr;
    o.momentum = momentum;
    o.weight_decay = weight_decay;
    return o;
  }
};

// One in-place update of params from grad. Moment buffers are created lazily
// on the first step; adam uses bias-corrected moments, sgd applies weight
// decay to the raw gradient before the momentum recurrence.
void optimizer_step(OptimizerState& opt, NetworkParams& params, const GradientEstimate& grad);

// ---- training loop ----

struct TrainOptions {
  int epochs = 1;
  std::size_t batch_size = 100;
  std::uint64_t seed = 1;
  // compare the batch gradient against the batch-mean backprop gradient every
  // n batches (0 = never); recorded before the optimizer step
  int grad_angle_every_n_batches = 0;
  bool lipschitz_every_epoch = true;
};

struct BatchRecord {
  int epoch = 0;
  int batch = 0;
  double train_loss = 0.0;   // mean unweighted forward loss over the batch
  int diverged_samples = 0;  // samples whose inference diverged (skipped)
  std::vector<double> grad_angle;    // per-layer degrees; empty if not sampled
  std::vector<double> grad_l2_diff;  // same cadence as grad_angle
};

struct EpochRecord {
  int epoch = 0;
  double test_accuracy = 0.0;
  double lipschitz = 0.0;  // NaN when disabled
};

struct TrainHistory {
  std::vector<BatchRecord> batches;
  std::vector<EpochRecord> epochs;
};

// Raised when a full epoch produces no usable gradient (every sample's
// inference diverged); carries the metrics recorded up to that point.
struct AbortedDiverged : std::runtime_error {
  TrainHistory history;
  AbortedDiverged(const std::string& msg, TrainHistory h)
      : std::runtime_error(msg), history(std::move(h)) {}
};

// Fraction of samples whose forward-pass argmax matches the label.
double accuracy(const NetworkParams& params, const Dataset& data);

// Minibatch training: per-epoch seeded shuffle, per-sample inference, batch
// gradient = mean over the samples that settled (diverged ones are skipped,
// counted in the batch record). Deterministic for a fixed seed and config.
TrainHistory train(const Dataset& train_set, const Dataset& test_set, NetworkParams& params,
                   const NudgeConfig& cfg, const LossKind& loss, OptimizerState& opt,
                   const TrainOptions& options);

}  // namespace dualprop
