#include <cmath>
#include <limits>
#include <utility>

#include "doctest.h"

#include "dualprop/analysis.hpp"
#include "dualprop/harness.hpp"
#include "dualprop/learning.hpp"
#include "dualprop/rng.hpp"

using namespace dualprop;

namespace {

std::vector<LayerSpec> chain(std::initializer_list<std::size_t> dims, ActivationKind hidden) {
  std::vector<std::size_t> d(dims);
  std::vector<LayerSpec> layers;
  for (std::size_t k = 0; k + 1 < d.size(); ++k) {
    ActivationKind act = (k + 2 == d.size()) ? ActivationKind::identity() : hidden;
    layers.push_back({d[k], d[k + 1], act});
  }
  return layers;
}

NudgeConfig make_cfg(Scheme scheme, double alpha, double beta) {
  NudgeConfig cfg;
  cfg.scheme = scheme;
  cfg.alpha = {alpha};
  cfg.beta = beta;
  return cfg;
}

Vector random_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double grad_fro_diff(const GradientEstimate& a, const GradientEstimate& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double f = frobenius_norm(sub(a[k], b[k]));
    acc += f * f;
  }
  return std::sqrt(acc);
}

double grad_fro(const GradientEstimate& a) {
  double acc = 0.0;
  for (const Matrix& M : a) {
    double f = frobenius_norm(M);
    acc += f * f;
  }
  return std::sqrt(acc);
}

}  // namespace

TEST_SUITE("learning") {
  TEST_CASE("contrastive weight gradient: hand values in both bias modes") {
    // One layer 2 -> 2, difference (1, 0), input (1, 1.5), beta = 1/2:
    // g = -(1/beta) * delta * input^T.
    NetworkParams p = init_weights({{2, 2, ActivationKind::identity()}}, 1);
    DyadicState st;
    st.input = {1.0, 1.5};
    st.s_plus = {{1.0, 0.0}};
    st.s_minus = {{0.0, 0.0}};
    NudgeConfig cfg = make_cfg(Scheme::DP, 0.5, 0.5);
    GradientEstimate g = weight_gradient(st, p, cfg);
    REQUIRE(g.size() == 1);
    CHECK(g[0](0, 0) == -2.0);
    CHECK(g[0](0, 1) == -3.0);
    CHECK(g[0](1, 0) == 0.0);
    CHECK(g[0](1, 1) == 0.0);

    // Augmented mode appends a bias column fed by a constant 1.
    NetworkParams aug = init_weights({{2, 2, ActivationKind::identity()}}, 1,
                                     BiasMode::Augmented);
    GradientEstimate ga = weight_gradient(st, aug, cfg);
    REQUIRE(ga[0].cols == 3);
    CHECK(ga[0](0, 2) == -2.0);
    CHECK(ga[0](1, 2) == 0.0);
  }

  TEST_CASE("contrastive weight gradient uses the alpha-weighted layer mean") {
    // Two layers 1 -> 1 -> 1, alpha = 1/4: mean_1 = 0.25*2 + 0.75*0 = 0.5.
    NetworkParams p = init_weights(chain({1, 1, 1}, ActivationKind::identity()), 1);
    DyadicState st;
    st.input = {1.0};
    st.s_plus = {{2.0}, {0.75}};
    st.s_minus = {{0.0}, {0.25}};
    NudgeConfig cfg = make_cfg(Scheme::DP, 0.25, 0.5);
    GradientEstimate g = weight_gradient(st, p, cfg);
    CHECK(g[0](0, 0) == -4.0);   // -(1/0.5) * delta_1 * x = -2 * 2 * 1
    CHECK(g[1](0, 0) == -0.5);   // -2 * delta_2 * mean_1 = -2 * 0.5 * 0.5

    DyadicState bad = st;
    bad.s_plus[0][0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(weight_gradient(bad, p, cfg), DivergedState);
  }

  TEST_CASE("reverse-mode oracle: hand case, zero residual, finite differences") {
    // One linear layer: gradient of (1/2)||W x - y||^2 is (W x - y) x^T.
    NetworkParams p = init_weights({{2, 2, ActivationKind::identity()}}, 1);
    p.weights[0] = Matrix::identity(2);
    Vector x{1.0, 2.0};
    LossKind ls = LossKind::least_squares(1.0);
    GradientEstimate g = backprop_oracle(p, x, Vector{0.0, 0.0}, ls);
    CHECK(g[0](0, 0) == 1.0);
    CHECK(g[0](0, 1) == 2.0);
    CHECK(g[0](1, 0) == 2.0);
    CHECK(g[0](1, 1) == 4.0);

    // A perfectly fit target gives an exactly zero gradient.
    NetworkParams q = init_weights(chain({3, 4, 2}, ActivationKind::relu()), 11);
    Rng rng(7);
    Vector xr = random_vector(3, rng);
    Vector yr = forward(q, xr).back();
    GradientEstimate gz = backprop_oracle(q, xr, yr, ls);
    for (const Matrix& M : gz) CHECK(frobenius_norm(M) == 0.0);

    // Central differences agree on a mixed-activation network, both losses.
    NetworkParams r = init_weights(chain({3, 5, 4, 2}, ActivationKind::relu()), 13,
                                   BiasMode::Augmented);
    Vector xs = random_vector(3, rng);
    for (LossKind loss : {LossKind::least_squares(0.5), LossKind::cross_entropy(0.5)}) {
      Vector ys = loss.family == LossKind::Family::LeastSquares
                      ? random_vector(2, rng)
                      : Vector{0.0, 1.0};
      GradientEstimate bp = backprop_oracle(r, xs, ys, loss);
      GradientEstimate fd = finite_difference_oracle(r, xs, ys, loss, 1e-5);
      double rel = grad_fro_diff(bp, fd) / (1.0 + grad_fro(bp));
      CHECK(rel <= 1e-6);
    }
  }

  TEST_CASE("central differences are near-exact on a deep linear network") {
    // The loss is quadratic in every single weight entry, so the second-order
    // truncation error vanishes and only rounding noise remains.
    NetworkParams p = init_weights(chain({3, 4, 2}, ActivationKind::identity()), 19);
    Rng rng(23);
    Vector x = random_vector(3, rng);
    Vector y = random_vector(2, rng);
    LossKind ls = LossKind::least_squares(0.5);
    GradientEstimate bp = backprop_oracle(p, x, y, ls);
    GradientEstimate fd = finite_difference_oracle(p, x, y, ls, 1e-4);
    CHECK(grad_fro_diff(bp, fd) / (1.0 + grad_fro(bp)) <= 1e-9);

    // Zero-residual case: central differences cancel symmetrically.
    Vector y0 = forward(p, x).back();
    GradientEstimate fd0 = finite_difference_oracle(p, x, y0, ls, 1e-5);
    CHECK(grad_fro(fd0) <= 1e-9);
  }

  TEST_CASE("the weak-nudge gradient matches reverse mode across schemes and alphas") {
    const double beta = 1e-4;
    NetworkParams p = init_weights(chain({6, 8, 5}, ActivationKind::relu()), 29);
    Rng rng(41);
    Vector x = random_vector(6, rng);
    Vector y = one_hot(2, 5);
    LossKind ls = LossKind::least_squares(beta);

    struct Setup {
      Scheme scheme;
      double alpha;
    };
    for (Setup s : {Setup{Scheme::DPT, 0.0}, Setup{Scheme::DPT, 0.5}, Setup{Scheme::DPT, 1.0},
                    Setup{Scheme::DP, 0.5}}) {
      NudgeConfig cfg = make_cfg(s.scheme, s.alpha, beta);
      InferenceReport rep = run_inference(p, x, y, cfg, ls);
      REQUIRE_FALSE(rep.diverged);
      GradientEstimate est = weight_gradient(rep.state, p, cfg);
      GradientEstimate bp = backprop_oracle(p, x, y, ls);
      for (double deg : grad_angle(est, bp)) CHECK(deg <= 2.563);  // cosine >= 0.999
    }

    // Cross entropy through the adjoint scheme.
    LossKind ce = LossKind::cross_entropy(beta);
    NudgeConfig cfg = make_cfg(Scheme::DPT, 0.5, beta);
    InferenceReport rep = run_inference(p, x, y, cfg, ce);
    REQUIRE_FALSE(rep.diverged);
    GradientEstimate est = weight_gradient(rep.state, p, cfg);
    GradientEstimate bp = backprop_oracle(p, x, y, ce);
    for (double deg : grad_angle(est, bp)) CHECK(deg <= 2.563);
  }

  TEST_CASE("the weak-nudge bias shrinks as beta shrinks") {
    NetworkParams p = init_weights(chain({4, 6, 3}, ActivationKind::relu()), 31);
    Rng rng(43);
    Vector x = random_vector(4, rng);
    Vector y = one_hot(1, 3);

    auto estimate_error = [&](Scheme scheme, double alpha, double beta) {
      LossKind ls = LossKind::least_squares(beta);
      NudgeConfig cfg = make_cfg(scheme, alpha, beta);
      InferenceReport rep = run_inference(p, x, y, cfg, ls);
      REQUIRE_FALSE(rep.diverged);
      GradientEstimate est = weight_gradient(rep.state, p, cfg);
      GradientEstimate bp = backprop_oracle(p, x, y, ls);
      return grad_fro_diff(est, bp) / (1.0 + grad_fro(bp));
    };

    // One-sided nudging (alpha = 1) solves the output subproblem with a
    // beta-dependent denominator and lets the layer means drift by O(beta),
    // so its gradient estimate carries a bias that is linear in beta.
    double coarse = estimate_error(Scheme::DP, 1.0, 1e-2);
    double fine = estimate_error(Scheme::DP, 1.0, 1e-4);
    CHECK(fine <= 1e-2);
    CHECK(coarse >= 5.0 * fine);  // roughly linear in beta, with slack

    // The adjoint scheme has no such bias on piecewise-linear activations:
    // its states reproduce reverse mode exactly, leaving only rounding noise
    // from the 1/beta readout.
    CHECK(estimate_error(Scheme::DPT, 0.5, 1e-2) <= 1e-10);
  }

  TEST_CASE("optimizer steps: hand-computed trajectories") {
    // Adam, first two steps with unit gradient.
    NetworkParams p = init_weights({{1, 1, ActivationKind::identity()}}, 1);
    p.weights[0](0, 0) = 0.0;
    OptimizerState adam = OptimizerState::adam(0.001);
    GradientEstimate g{Matrix(1, 1, 1.0)};
    optimizer_step(adam, p, g);
    double step1 = 0.001 / (1.0 + 1e-8);
    CHECK(p.weights[0](0, 0) == doctest::Approx(-step1).epsilon(1e-12));
    CHECK(adam.step_count == 1);
    optimizer_step(adam, p, g);
    CHECK(p.weights[0](0, 0) == doctest::Approx(-2.0 * step1).epsilon(1e-9));

    // Adam's step magnitude is invariant to gradient rescaling.
    NetworkParams q = init_weights({{1, 1, ActivationKind::identity()}}, 1);
    q.weights[0](0, 0) = 0.0;
    OptimizerState adam2 = OptimizerState::adam(0.001);
    GradientEstimate big{Matrix(1, 1, 1e6)};
    optimizer_step(adam2, q, big);
    CHECK(std::abs(q.weights[0](0, 0)) <= 0.001 + 1e-12);
    CHECK(std::abs(q.weights[0](0, 0)) >= 0.001 * (1.0 - 1e-6));

    // SGD with momentum 0.9: velocities 1 then 1.9.
    NetworkParams r = init_weights({{1, 1, ActivationKind::identity()}}, 1);
    r.weights[0](0, 0) = 0.0;
    OptimizerState sgd = OptimizerState::sgd_momentum(0.1, 0.9);
    optimizer_step(sgd, r, g);
    CHECK(r.weights[0](0, 0) == doctest::Approx(-0.1).epsilon(1e-15));
    optimizer_step(sgd, r, g);
    CHECK(r.weights[0](0, 0) == doctest::Approx(-0.29).epsilon(1e-14));

    // Weight decay feeds the parameter value into the raw gradient.
    NetworkParams w = init_weights({{1, 1, ActivationKind::identity()}}, 1);
    w.weights[0](0, 0) = 1.0;
    OptimizerState decay = OptimizerState::sgd_momentum(0.1, 0.9, 0.1);
    GradientEstimate zero{Matrix(1, 1, 0.0)};
    optimizer_step(decay, w, zero);
    CHECK(w.weights[0](0, 0) == doctest::Approx(0.99).epsilon(1e-14));

    // Shape mismatches are rejected.
    GradientEstimate wrong{Matrix(2, 2, 0.0)};
    CHECK_THROWS_AS(optimizer_step(sgd, r, wrong), DimensionError);
  }

  TEST_CASE("accuracy counts argmax hits and rejects an empty dataset") {
    NetworkParams p = init_weights({{2, 2, ActivationKind::identity()}}, 1);
    p.weights[0] = Matrix::identity(2);
    Dataset d;
    d.samples = {{2.0, 0.0}, {0.0, 2.0}, {3.0, 1.0}};
    d.labels = {0, 1, 1};  // last one is a miss (argmax 0)
    d.classes = 2;
    CHECK(accuracy(p, d) == doctest::Approx(2.0 / 3.0));
    Dataset empty;
    CHECK_THROWS_AS(accuracy(p, empty), std::invalid_argument);
  }

  TEST_CASE("training separates well-spaced clusters") {
    Dataset train_set = synth_blobs(3, 4, 30, 8.0, 3);
    Dataset test_set = synth_blobs(3, 4, 20, 8.0, 1003);
    NetworkParams p = init_weights(chain({4, 16, 3}, ActivationKind::relu()), 5);
    LossKind ls = LossKind::least_squares(0.01);
    NudgeConfig cfg = make_cfg(Scheme::DPT, 0.5, 0.01);
    OptimizerState opt = OptimizerState::adam(0.01);
    TrainOptions options;
    options.epochs = 10;
    options.batch_size = 15;
    options.seed = 5;
    TrainHistory hist = train(train_set, test_set, p, cfg, ls, opt, options);
    REQUIRE(hist.epochs.size() == 10);
    CHECK(hist.epochs.back().test_accuracy >= 0.95);
    CHECK(hist.epochs.back().lipschitz > 0.0);
    // Loss goes down over training.
    CHECK(hist.batches.back().train_loss < hist.batches.front().train_loss);
  }

  TEST_CASE("training is deterministic for a fixed seed") {
    Dataset train_set = synth_blobs(2, 3, 12, 6.0, 9);
    Dataset test_set = synth_blobs(2, 3, 6, 6.0, 1009);
    auto run = [&]() {
      NetworkParams p = init_weights(chain({3, 5, 2}, ActivationKind::relu()), 2);
      LossKind ls = LossKind::least_squares(0.5);
      NudgeConfig cfg = make_cfg(Scheme::DPT, 0.5, 0.5);
      OptimizerState opt = OptimizerState::adam(0.005);
      TrainOptions options;
      options.epochs = 3;
      options.batch_size = 8;
      options.seed = 4;
      TrainHistory hist = train(train_set, test_set, p, cfg, ls, opt, options);
      return std::pair<NetworkParams, TrainHistory>(std::move(p), std::move(hist));
    };
    auto [p1, h1] = run();
    auto [p2, h2] = run();
    for (std::size_t k = 0; k < p1.weights.size(); ++k) {
      CHECK(p1.weights[k].data == p2.weights[k].data);  // bitwise
    }
    REQUIRE(h1.batches.size() == h2.batches.size());
    for (std::size_t i = 0; i < h1.batches.size(); ++i) {
      CHECK(h1.batches[i].train_loss == h2.batches[i].train_loss);
    }
  }

  TEST_CASE("a zero learning rate leaves every weight bitwise untouched") {
    Dataset train_set = synth_blobs(2, 3, 10, 6.0, 9);
    NetworkParams p = init_weights(chain({3, 4, 2}, ActivationKind::relu()), 6);
    NetworkParams before = p;
    LossKind ls = LossKind::least_squares(0.5);
    NudgeConfig cfg = make_cfg(Scheme::DPT, 0.5, 0.5);
    OptimizerState opt = OptimizerState::adam(0.0);
    TrainOptions options;
    options.epochs = 2;
    options.batch_size = 5;
    options.seed = 1;
    train(train_set, Dataset{}, p, cfg, ls, opt, options);
    for (std::size_t k = 0; k < p.weights.size(); ++k) {
      CHECK(p.weights[k].data == before.weights[k].data);
    }
  }

  TEST_CASE("history records batch cadence, metric sampling, and NaN markers") {
    Dataset train_set = synth_blobs(2, 3, 5, 6.0, 9);  // n = 10
    NetworkParams p = init_weights(chain({3, 4, 2}, ActivationKind::relu()), 6);
    LossKind ls = LossKind::least_squares(0.5);
    NudgeConfig cfg = make_cfg(Scheme::DPT, 0.5, 0.5);
    OptimizerState opt = OptimizerState::adam(0.001);
    TrainOptions options;
    options.epochs = 2;
    options.batch_size = 4;  // batches of 4, 4, 2 per epoch
    options.seed = 3;
    options.grad_angle_every_n_batches = 2;
    options.lipschitz_every_epoch = false;
    TrainHistory hist = train(train_set, Dataset{}, p, cfg, ls, opt, options);

    REQUIRE(hist.batches.size() == 6);
    REQUIRE(hist.epochs.size() == 2);
    int idx = 0;
    for (int epoch = 0; epoch < 2; ++epoch) {
      for (int b = 0; b < 3; ++b, ++idx) {
        const BatchRecord& rec = hist.batches[static_cast<std::size_t>(idx)];
        CHECK(rec.epoch == epoch);
        CHECK(rec.batch == b);
        CHECK(std::isfinite(rec.train_loss));
        bool sampled = (b % 2) == 0;
        CHECK(rec.grad_angle.size() == (sampled ? p.depth() : 0));
        CHECK(rec.grad_l2_diff.size() == rec.grad_angle.size());
      }
    }
    for (const EpochRecord& er : hist.epochs) {
      CHECK(std::isnan(er.test_accuracy));  // no test set supplied
      CHECK(std::isnan(er.lipschitz));      // estimation disabled
    }
  }

  TEST_CASE("an epoch where every sample diverges aborts with the partial history") {
    Dataset data = synth_digits(5, 77);  // 50 samples, 784-dimensional
    NetworkParams p = init_weights(chain({784, 64, 10}, ActivationKind::identity()), 3);
    LossKind ls = LossKind::least_squares(0.5);
    NudgeConfig cfg = make_cfg(Scheme::DP, 0.0, 0.5);
    cfg.schedule = Schedule::repeated_sweeps(30);
    OptimizerState opt = OptimizerState::adam(0.001);
    TrainOptions options;
    options.epochs = 1;
    options.batch_size = 25;
    options.seed = 1;
    options.lipschitz_every_epoch = false;
    try {
      train(data, Dataset{}, p, cfg, ls, opt, options);
      FAIL("expected the run to abort");
    } catch (const AbortedDiverged& e) {
      REQUIRE(e.history.batches.size() == 2);
      CHECK(e.history.batches[0].diverged_samples == 25);
      CHECK(e.history.batches[1].diverged_samples == 25);
      CHECK(e.history.epochs.empty());
    }
  }
}
