#include "dualprop/inference.hpp"

#include <cmath>

namespace dualprop {

namespace {

// inner fixed-point solver for the cross-entropy output subproblem
constexpr double kInnerTol = 1e-10;
constexpr int kInnerMaxSteps = 500;

bool all_finite(const Vector& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// W^T d with the trailing bias row (if any) dropped
Vector feedback(const Matrix& W, const Vector& d, std::size_t state_dim) {
  Vector fb = matvec_transposed(W, d);
  fb.resize(state_dim);
  return fb;
}

// mean of layer k; the k = 0 case is the clamped input, where alpha is moot
Vector layer_mean(const DyadicState& st, std::size_t k, const NudgeConfig& cfg) {
  return st.mean(k, k == 0 ? 0.0 : cfg.alpha_for(k));
}

}  // namespace

Vector DyadicState::mean(std::size_t k, double alpha) const {
  if (k == 0) return input;
  const Vector& p = s_plus[k - 1];
  const Vector& m = s_minus[k - 1];
  Vector out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    out[i] = alpha * p[i] + (1.0 - alpha) * m[i];
  return out;
}

Vector DyadicState::delta(std::size_t k) const {
  return sub(s_plus[k - 1], s_minus[k - 1]);
}

double NudgeConfig::alpha_for(std::size_t k) const {
  if (alpha.size() == 1) return alpha[0];
  return alpha.at(k - 1);
}

void NudgeConfig::validate(const NetworkParams& params, const LossKind& loss) const {
  const std::size_t L = params.depth();
  if (L == 0) throw InvalidNudgeConfig("network has no layers");
  if (alpha.empty() || (alpha.size() != 1 && alpha.size() != L))
    throw InvalidNudgeConfig("alpha must be one value or one per layer");
  for (double a : alpha)
    if (!(a >= 0.0 && a <= 1.0)) throw InvalidNudgeConfig("alpha outside [0,1]");
  if (!(beta > 0.0)) throw InvalidNudgeConfig("beta must be positive");
  if (std::abs(beta - loss.beta) > 1e-15)
    throw InvalidNudgeConfig("nudge beta and loss beta disagree");
  if (schedule.passes < 1) throw InvalidNudgeConfig("schedule needs at least one pass");
  if (!(divergence_threshold > 0.0))
    throw InvalidNudgeConfig("divergence threshold must be positive");
  if (params.layers.back().activation.kind != ActivationKind::Kind::Identity)
    throw InvalidNudgeConfig("output layer must use the identity activation");

  if (scheme != Scheme::DPT && loss.family == LossKind::Family::LeastSquares) {
    const double abar = 1.0 - output_alpha();
    if (abar * beta >= 1.0)
      throw InvalidNudgeConfig("negative-phase output curvature requires (1-alpha)*beta < 1");
  }
  if (scheme == Scheme::DPStabilized) {
    for (double a : alpha)
      if (a != 0.0 && a != 0.5 && a != 1.0)
        throw InvalidNudgeConfig("projection solver supports alpha in {0, 1/2, 1} only");
    for (double a : alpha)
      if (a != alpha[0])
        throw InvalidNudgeConfig("projection solver needs a single shared alpha");
  }
  if (damping.kind == Damping::Kind::PerLayer && damping.layer_values.size() != L)
    throw InvalidNudgeConfig("per-layer damping needs one value per layer");
  for (double d : damping.layer_values)
    if (!(d >= 0.0) || !std::isfinite(d))
      throw InvalidNudgeConfig("damping values must be finite and non-negative");
}

// ---- hidden updates ----

namespace {

DyadicPair hidden_update(std::size_t k, const DyadicState& state, const NetworkParams& params,
                         const NudgeConfig& cfg, bool adjoint) {
  const double a = cfg.alpha_for(k);
  const double abar = 1.0 - a;
  const Vector drive = layer_preactivation(params, k - 1, layer_mean(state, k - 1, cfg));
  const Vector fb =
      feedback(params.weights[k], state.delta(k + 1), params.layers[k].in);
  const ActivationKind& f = params.layers[k - 1].activation;
  // plus/minus feedback coefficients: (a, abar) for the plain rule,
  // (abar, a) for the adjoint rule
  const double cp = adjoint ? abar : a;
  const double cm = adjoint ? a : abar;
  DyadicPair out;
  out.plus = activation_apply(f, axpy(drive, cp, fb));
  out.minus = activation_apply(f, axpy(drive, -cm, fb));
  return out;
}

}  // namespace

DyadicPair dp_hidden_update(std::size_t k, const DyadicState& state,
                            const NetworkParams& params, const NudgeConfig& cfg) {
  return hidden_update(k, state, params, cfg, false);
}

DyadicPair dpt_hidden_update(std::size_t k, const DyadicState& state,
                             const NetworkParams& params, const NudgeConfig& cfg) {
  return hidden_update(k, state, params, cfg, true);
}

// ---- output updates ----

namespace {

// Solve s = a - c * grad_ce(s) for the cross-entropy subproblem
//   min_s  c * CE(softmax(s), y) + ||s||^2/2 - s^T a        (c = alpha*beta)
// or its negative-phase counterpart (c = -(1-alpha)*beta). The relaxed
// fixed-point step is plain gradient descent with step 1/(1+|c|/2), which
// contracts whenever the subproblem is strongly convex (|c| < 2 covers the
// negative phase; the positive phase is convex for any c >= 0).
Vector ce_output_solve(const Vector& a_out, const Vector& y, const LossKind& loss, double c) {
  if (c <= -2.0)
    throw OutputSubproblemNonconvex("cross-entropy negative phase needs (1-alpha)*beta < 2");
  const double tau = 1.0 / (1.0 + std::abs(c) / 2.0);
  Vector s = a_out;
  for (int step = 0; step < kInnerMaxSteps; ++step) {
    Vector g = loss.unweighted_gradient(s, y);  // softmax(s) - y
    double change = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      double target = a_out[i] - c * g[i];
      double next = s[i] + tau * (target - s[i]);
      change = std::max(change, std::abs(next - s[i]));
      s[i] = next;
    }
    if (!all_finite(s)) throw NoConvergence("output fixed point produced non-finite values");
    if (change < kInnerTol) return s;
  }
  throw NoConvergence("output fixed point did not reach tolerance");
}

}  // namespace

DyadicPair dp_output_update(const Vector& a_out, const Vector& y, const LossKind& loss,
                            const NudgeConfig& cfg) {
  if (a_out.size() != y.size()) throw DimensionError("output update: target size mismatch");
  const double alpha = cfg.output_alpha();
  const double abar = 1.0 - alpha;
  const double beta = cfg.beta;
  DyadicPair out;
  switch (loss.family) {
    case LossKind::Family::LeastSquares: {
      if (abar * beta >= 1.0)
        throw OutputSubproblemNonconvex("negative-phase output curvature is not positive");
      out.plus.resize(a_out.size());
      out.minus.resize(a_out.size());
      for (std::size_t i = 0; i < a_out.size(); ++i) {
        out.plus[i] = (a_out[i] + alpha * beta * y[i]) / (1.0 + alpha * beta);
        out.minus[i] = (a_out[i] - abar * beta * y[i]) / (1.0 - abar * beta);
      }
      break;
    }
    case LossKind::Family::CrossEntropy:
      out.plus = ce_output_solve(a_out, y, loss, alpha * beta);
      out.minus = ce_output_solve(a_out, y, loss, -abar * beta);
      break;
  }
  return out;
}

DyadicPair dpt_output_update(const Vector& a_out, const Vector& y, const LossKind& loss,
                             const NudgeConfig& cfg) {
  if (a_out.size() != y.size()) throw DimensionError("output update: target size mismatch");
  const double alpha = cfg.output_alpha();
  const Vector g = scale(loss.unweighted_gradient(a_out, y), cfg.beta);
  DyadicPair out;
  out.plus = axpy(a_out, -(1.0 - alpha), g);
  out.minus = axpy(a_out, alpha, g);
  return out;
}

// ---- stabilized single-chain update ----

Vector stabilized_update(const NetworkParams& params, std::size_t k, const Vector& s_prev,
                         const Vector& s_cur, const Vector& s_next, double damping) {
  const ActivationKind& f_k = params.layers[k - 1].activation;
  const ActivationKind& f_next = params.layers[k].activation;
  if (!f_k.quadratic_indicator() || !f_next.quadratic_indicator())
    throw UnsupportedActivation("stabilized update needs projection-form activations");
  if (damping < 0.0) throw InvalidNudgeConfig("damping must be non-negative");

  const Vector drive = layer_preactivation(params, k - 1, s_prev);
  const Vector up = layer_preactivation(params, k, s_cur);
  const Vector residual = sub(s_next, activation_apply(f_next, up));
  const Vector fb = feedback(params.weights[k], residual, params.layers[k].in);

  Vector out(s_cur.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f_k.project((drive[i] + fb[i] + damping * s_cur[i]) / (1.0 + damping));
  return out;
}

std::vector<double> stabilized_damping_values(const NetworkParams& params, int power_steps) {
  params.check_consistent();
  std::vector<double> damp(params.depth(), 0.0);
  for (std::size_t k = 1; k < params.depth(); ++k) {
    Matrix W = params.weights[k];
    if (params.bias == BiasMode::Augmented) {
      // feedback acts through the linear part only
      Matrix lin(W.rows, W.cols - 1);
      for (std::size_t i = 0; i < W.rows; ++i)
        for (std::size_t j = 0; j + 1 < W.cols; ++j) lin(i, j) = W(i, j);
      W = std::move(lin);
    }
    double sigma = spectral_norm(W, power_steps);
    damp[k] = sigma * sigma;  // estimate of ||W^T W||_2
  }
  return damp;
}

// ---- full inference ----

namespace {

struct Engine {
  const NetworkParams& params;
  const NudgeConfig& cfg;
  const LossKind& loss;
  const Vector& y;
  DyadicState& st;
  std::vector<double> damp;  // per weight index, stabilized scheme only
  double pass_residual = 0.0;

  // which compartment holds the single chain in the stabilized scheme
  bool chain_plus() const { return cfg.alpha[0] == 1.0; }

  double update_norm(const Vector& before, const Vector& after) { return norm2(sub(after, before)); }

  void note(const Vector& before, const Vector& after) {
    pass_residual = std::max(pass_residual, update_norm(before, after));
  }

  void set_plus(std::size_t k, Vector v) {
    note(st.s_plus[k - 1], v);
    st.s_plus[k - 1] = std::move(v);
  }
  void set_minus(std::size_t k, Vector v) {
    note(st.s_minus[k - 1], v);
    st.s_minus[k - 1] = std::move(v);
  }

  void hidden(std::size_t k) {
    if (cfg.scheme == Scheme::DPStabilized && cfg.alpha[0] != 0.5) {
      stabilized_hidden(k);
      return;
    }
    DyadicPair p = (cfg.scheme == Scheme::DPT)
                       ? dpt_hidden_update(k, st, params, cfg)
                       : dp_hidden_update(k, st, params, cfg);
    set_plus(k, std::move(p.plus));
    set_minus(k, std::move(p.minus));
  }

  void stabilized_hidden(std::size_t k) {
    const bool plus = chain_plus();
    const Vector& prev = (k == 1) ? st.input
                                  : (plus ? st.s_plus[k - 2] : st.s_minus[k - 2]);
    const Vector& cur = plus ? st.s_plus[k - 1] : st.s_minus[k - 1];
    const Vector& next = plus ? st.s_plus[k] : st.s_minus[k];
    Vector z = stabilized_update(params, k, prev, cur, next, damp[k]);
    // the eliminated compartment sits at the plain forward response
    Vector comp = activation_apply(params.layers[k - 1].activation,
                                   layer_preactivation(params, k - 1, prev));
    if (plus) {
      set_plus(k, std::move(z));
      set_minus(k, std::move(comp));
    } else {
      set_minus(k, std::move(z));
      set_plus(k, std::move(comp));
    }
  }

  void output() {
    const std::size_t L = params.depth();
    const Vector a_out = layer_preactivation(params, L - 1, layer_mean(st, L - 1, cfg));
    DyadicPair p = (cfg.scheme == Scheme::DPT) ? dpt_output_update(a_out, y, loss, cfg)
                                               : dp_output_update(a_out, y, loss, cfg);
    set_plus(L, std::move(p.plus));
    set_minus(L, std::move(p.minus));
  }

  bool diverged() const {
    for (std::size_t i = 0; i < st.depth(); ++i) {
      double np = norm2(st.s_plus[i]);
      double nm = norm2(st.s_minus[i]);
      if (!std::isfinite(np) || !std::isfinite(nm)) return true;
      if (np > cfg.divergence_threshold || nm > cfg.divergence_threshold) return true;
    }
    return false;
  }
};

}  // namespace

InferenceReport run_inference(const NetworkParams& params, const Vector& x, const Vector& y,
                              const NudgeConfig& cfg, const LossKind& loss) {
  params.check_consistent();
  cfg.validate(params, loss);
  if (x.size() != params.input_dim()) throw DimensionError("inference: input size mismatch");
  if (y.size() != params.output_dim()) throw DimensionError("inference: target size mismatch");

  InferenceReport rep;
  DyadicState& st = rep.state;
  st.input = x;
  st.s_plus = forward(params, x);
  st.s_minus = st.s_plus;

  Engine eng{params, cfg, loss, y, st, {}, 0.0};
  if (cfg.scheme == Scheme::DPStabilized && cfg.alpha[0] != 0.5) {
    switch (cfg.damping.kind) {
      case Damping::Kind::PerLayer:
        eng.damp = cfg.damping.layer_values;
        break;
      case Damping::Kind::Explicit:
        eng.damp.assign(params.depth(), cfg.damping.value);
        break;
      case Damping::Kind::AutoPowerIter:
        eng.damp = stabilized_damping_values(params, cfg.damping.power_steps);
        break;
    }
  }

  const std::size_t L = params.depth();
  const int passes = cfg.schedule.passes;
  for (int pass = 1; pass <= passes; ++pass) {
    eng.pass_residual = 0.0;
    for (std::size_t k = 1; k < L; ++k) eng.hidden(k);
    eng.output();
    if (cfg.schedule.kind != Schedule::Kind::ForwardPasses)
      for (std::size_t k = L - 1; k >= 1; --k) eng.hidden(k);
    rep.iterations = pass;
    rep.residual = eng.pass_residual;
    if (eng.diverged()) {
      rep.diverged = true;
      break;
    }
  }
  return rep;
}

// ---- potential ----

double dp_potential_value(const DyadicState& state, const NetworkParams& params,
                          const Vector& y, const LossKind& loss, const NudgeConfig& cfg) {
  params.check_consistent();
  const std::size_t L = params.depth();
  if (state.depth() != L) throw DimensionError("potential: state depth mismatch");

  const double a_out = cfg.output_alpha();
  double value = a_out * loss.value(state.s_plus[L - 1], y) +
                 (1.0 - a_out) * loss.value(state.s_minus[L - 1], y);

  double contrast = 0.0;
  for (std::size_t k = 1; k <= L; ++k) {
    const ActivationKind& f = params.layers[k - 1].activation;
    const Vector drive = layer_preactivation(params, k - 1, layer_mean(state, k - 1, cfg));
    for (const Vector* s : {&state.s_plus[k - 1], &state.s_minus[k - 1]}) {
      for (double v : *s)
        if (!f.feasible(v))
          throw InfeasibleState("state outside the activation's feasible set at layer " +
                                std::to_string(k));
      double e = 0.5 * dot(*s, *s) - dot(*s, drive);
      contrast += (s == &state.s_plus[k - 1]) ? e : -e;
    }
  }
  return value + contrast / cfg.beta;
}

}  // namespace dualprop
