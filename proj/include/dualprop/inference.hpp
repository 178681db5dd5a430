#pragma once

#include <cstdint>
#include <vector>

#include "dualprop/linalg.hpp"
#include "dualprop/loss.hpp"
#include "dualprop/model.hpp"

namespace dualprop {

struct OutputSubproblemNonconvex : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoConvergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InfeasibleState : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidNudgeConfig : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Paired neuron states. Layer k in 1..L lives at index k-1; layer 0 is the
// clamped input. The mean state drives the forward drive, the difference
// carries the learning signal.
struct DyadicState {
  Vector input;
  std::vector<Vector> s_plus;
  std::vector<Vector> s_minus;

  std::size_t depth() const { return s_plus.size(); }
  // alpha-weighted mean of layer k (k = 0 returns the input unchanged)
  Vector mean(std::size_t k, double alpha) const;
  // s_plus - s_minus of layer k, k in 1..L
  Vector delta(std::size_t k) const;
};

enum class Scheme { DP, DPT, DPStabilized };

struct Schedule {
  enum class Kind { SingleSweep, RepeatedSweeps, ForwardPasses };
  Kind kind = Kind::SingleSweep;
  int passes = 1;

  static Schedule single_sweep() { return {Kind::SingleSweep, 1}; }
  static Schedule repeated_sweeps(int n) { return {Kind::RepeatedSweeps, n}; }
  static Schedule forward_passes(int n) { return {Kind::ForwardPasses, n}; }
};

// Damping used by the projection-based solver: per-layer value derived from
// a short power-iteration estimate of ||W_k^T W_k||_2, one explicit value for
// every layer, or precomputed per-layer values (e.g. cached across a batch
// while the weights are fixed).
struct Damping {
  enum class Kind { AutoPowerIter, Explicit, PerLayer };
  Kind kind = Kind::AutoPowerIter;
  int power_steps = 5;
  double value = 0.0;
  std::vector<double> layer_values;  // PerLayer: entry k damps hidden layer k

  static Damping auto_power_iter(int steps = 5) { return {Kind::AutoPowerIter, steps, 0.0, {}}; }
  static Damping explicit_value(double v) { return {Kind::Explicit, 5, v, {}}; }
  static Damping per_layer(std::vector<double> values) {
    Damping d;
    d.kind = Kind::PerLayer;
    d.layer_values = std::move(values);
    return d;
  }
};

struct NudgeConfig {
  // one entry = shared by every layer; otherwise one entry per layer 1..L
  std::vector<double> alpha{0.5};
  double beta = 0.5;
  Scheme scheme = Scheme::DPT;
  Schedule schedule = Schedule::single_sweep();
  Damping damping = Damping::auto_power_iter();
  double divergence_threshold = 1e6;

  double alpha_for(std::size_t k) const;  // k in 1..L
  double output_alpha() const { return alpha.back(); }

  // Shared invariants: alphas in [0,1], beta > 0 and equal to the loss beta,
  // at least one pass, DP least-squares curvature (1-alpha_L)*beta < 1, and
  // the projection solver restricted to alpha in {0, 1/2, 1}.
  void validate(const NetworkParams& params, const LossKind& loss) const;
};

struct InferenceReport {
  DyadicState state;
  int iterations = 0;    // passes actually executed
  double residual = 0.0; // max layer update norm seen in the final pass
  bool diverged = false;
};

struct DyadicPair {
  Vector plus;
  Vector minus;
};

// One update of hidden layer k in 1..L-1. The drive is W_{k-1} applied to the
// mean of layer k-1; the feedback is W_k^T applied to the difference of layer
// k+1, entering the two compartments with weights (alpha, 1-alpha) here and
// swapped in the adjoint variant.
DyadicPair dp_hidden_update(std::size_t k, const DyadicState& state,
                            const NetworkParams& params, const NudgeConfig& cfg);
DyadicPair dpt_hidden_update(std::size_t k, const DyadicState& state,
                             const NetworkParams& params, const NudgeConfig& cfg);

// Output-layer updates given the pre-activation a_L. The first solves the two
// nudged output subproblems exactly (closed form for least squares, damped
// fixed point for cross entropy); the adjoint variant takes a single loss
// gradient at a_L, so its mean stays at a_L and its difference is exactly
// minus that gradient.
DyadicPair dp_output_update(const Vector& a_out, const Vector& y, const LossKind& loss,
                            const NudgeConfig& cfg);
DyadicPair dpt_output_update(const Vector& a_out, const Vector& y, const LossKind& loss,
                             const NudgeConfig& cfg);

// Damped projection step for the single-chain relaxation of hidden layer k:
//   s <- Pi_C( (W_{k-1} s_prev + W_k^T (s_next - f_{k+1}(W_k s_cur)) + L s_cur) / (1+L) )
// Contraction needs L > max(0, (||W_k^T W_k||_2 - 1)/2); L at or above
// ||W_k^T W_k||_2 additionally makes the underlying objective decrease
// monotonically. Rejects activations without a projection form.
Vector stabilized_update(const NetworkParams& params, std::size_t k, const Vector& s_prev,
                         const Vector& s_cur, const Vector& s_next, double damping);

// Power-iteration damping for every hidden layer: entry k (k in 1..L-1) is
// the squared largest-singular-value estimate of the linear part of W_k;
// entry 0 is unused and zero. Depends only on the weights, so callers may
// compute it once and reuse it through Damping::per_layer while the weights
// are unchanged.
std::vector<double> stabilized_damping_values(const NetworkParams& params, int power_steps = 5);

// Runs the configured schedule from a forward-pass initialization (so the
// difference states start at zero) and reports the final dyadic state.
// Divergence (any state above cfg.divergence_threshold, or non-finite) stops
// the run and flags the report instead of throwing.
InferenceReport run_inference(const NetworkParams& params, const Vector& x, const Vector& y,
                              const NudgeConfig& cfg, const LossKind& loss);

// Contrastive network potential
//   alpha*l(s_L+) + (1-alpha)*l(s_L-) + (1/beta) * sum_k [E_k(s_k+) - E_k(s_k-)]
// with E_k(s) = ||s||^2/2 + indicator(C_k) - s^T W_{k-1} mean_{k-1}. States
// outside their feasible set make the indicator infinite, which is reported
// as InfeasibleState.
double dp_potential_value(const DyadicState& state, const NetworkParams& params,
                          const Vector& y, const LossKind& loss, const NudgeConfig& cfg);

}  // namespace dualprop
