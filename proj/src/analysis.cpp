#include "dualprop/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "dualprop/inference.hpp"
#include "dualprop/rng.hpp"

namespace dualprop {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kCurvatureMargin = 1e-10;

bool all_finite(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double quad_value(const Matrix& H, const Vector& b, const Vector& s) {
  return 0.5 * dot(s, matvec(H, s)) + dot(b, s);
}

// argmin_s c*l(s) + E(s)/beta, i.e. solve (c H_l + H_E/beta) s = -(c b_l + b_E/beta).
// The system matrix must be strictly convex; the interesting failure mode is
// a too-negative coefficient (the adversarial phase losing concavity of the
// inner max), which surfaces as IndefiniteSubproblem.
Vector coefficient_argmin(const QuadraticRelaxationInstance& inst, double c, double beta) {
  Matrix A = add(scale(inst.H_l, c), scale(inst.H_E, 1.0 / beta));
  if (smallest_eigenvalue_sym(A) <= kCurvatureMargin) {
    throw IndefiniteSubproblem("relaxation subproblem with loss coefficient " +
                               std::to_string(c) + " is not positive definite");
  }
  Vector rhs = axpy(scale(inst.b_E, -1.0 / beta), -c, inst.b_l);
  return solve(A, rhs);
}

double loss_at_coefficient(const QuadraticRelaxationInstance& inst, double c, double beta) {
  Vector s = coefficient_argmin(inst, c, beta);
  return quad_value(inst.H_l, inst.b_l, s);
}

// Weight matrix with the trailing bias column (if any) removed, leaving the
// pure linear map between layer states.
Matrix linear_part(const NetworkParams& params, std::size_t k) {
  const Matrix& W = params.weights[k];
  if (params.bias == BiasMode::Off) return W;
  Matrix out(W.rows, W.cols - 1);
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) = W(i, j);
  }
  return out;
}

Vector gaussian_vector(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Matrix gaussian_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix M(r, c);
  for (double& x : M.data) x = rng.normal();
  return M;
}

// Strongly convex curvature: Gram matrix scaled to O(1) plus a shift drawn
// from [0.9, 1.25], so the smallest eigenvalue is at least 0.9.
Matrix random_strongly_convex(Rng& rng, std::size_t d) {
  Matrix G = gaussian_matrix(rng, d, d);
  Matrix H = scale(matmul(transpose(G), G), 1.0 / static_cast<double>(d));
  double shift = 0.75 + 0.5 * rng.uniform(0.3, 1.0);
  for (std::size_t i = 0; i < d; ++i) H(i, i) += shift;
  return H;
}

// PSD loss curvature rescaled so its largest eigenvalue lands in
// [0.21, 0.7], keeping every battery evaluation strictly convex.
Matrix random_loss_curvature(Rng& rng, std::size_t d) {
  Matrix G = gaussian_matrix(rng, d, d);
  Matrix H = matmul(transpose(G), G);
  double target = 0.7 * rng.uniform(0.3, 1.0);
  double lam = largest_eigenvalue_sym(H);
  if (lam <= 1e-12) return Matrix(d, d, 0.0);
  return scale(H, target / lam);
}

// Spectral radius estimate via Gelfand's formula: ||T^64||_F^(1/64), computed
// by six normalized squarings with the scale tracked in log space. Exact for
// scalars; the 64th root shrinks the norm-vs-radius slack to a few percent.
double gelfand_radius(const Matrix& T) {
  if (T.rows == 0 || T.rows != T.cols) {
    throw DimensionError("spectral radius needs a nonempty square matrix");
  }
  double log_scale = 0.0;
  Matrix B = T;
  for (int j = 0; j < 6; ++j) {
    double f = frobenius_norm(B);
    if (!(f > 0.0)) return 0.0;  // nilpotent at this power (or zero map)
    B = scale(B, 1.0 / f);
    log_scale = 2.0 * (log_scale + std::log(f));
    B = matmul(B, B);
  }
  double tail = frobenius_norm(B);
  if (!(tail > 0.0)) return 0.0;
  return std::exp((log_scale + std::log(tail)) / 64.0);
}

struct OrderingTally {
  double max_increase = 0.0;
  double max_decrease = 0.0;

  void feed(const std::vector<double>& series) {
    for (std::size_t k = 0; k + 1 < series.size(); ++k) {
      double d = series[k + 1] - series[k];
      max_increase = std::max(max_increase, d);
      max_decrease = std::max(max_decrease, -d);
    }
  }

  std::string direction(double tol) const {
    bool non_increasing = max_increase <= tol;
    bool non_decreasing = max_decrease <= tol;
    if (non_increasing) return "non_increasing";
    if (non_decreasing) return "non_decreasing";
    return "mixed";
  }
};

// Records lhs <= rhs + tol failures into the report.
void require_leq(PropositionReport& rep, double lhs, double rhs, double tol) {
  double slack = lhs - rhs;
  if (slack > tol) {
    ++rep.violations;
    rep.max_violation = std::max(rep.max_violation, slack);
  }
}

}  // namespace

std::vector<double> grad_angle(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.size() != b.size()) throw DimensionError("gradient stacks differ in depth");
  std::vector<double> out;
  out.reserve(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!a[k].same_shape(b[k])) throw DimensionError("gradient layer shapes differ");
    double na = frobenius_norm(a[k]);
    double nb = frobenius_norm(b[k]);
    if (na == 0.0 || nb == 0.0) {
      out.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    double cosine = 0.0;
    for (std::size_t i = 0; i < a[k].data.size(); ++i) cosine += a[k].data[i] * b[k].data[i];
    cosine = std::clamp(cosine / (na * nb), -1.0, 1.0);
    out.push_back(std::acos(cosine) * 180.0 / kPi);
  }
  return out;
}

std::vector<double> grad_l2_diff(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.size() != b.size()) throw DimensionError("gradient stacks differ in depth");
  std::vector<double> out;
  out.reserve(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!a[k].same_shape(b[k])) throw DimensionError("gradient layer shapes differ");
    out.push_back(frobenius_norm(sub(a[k], b[k])));
  }
  return out;
}

double lipschitz_estimate(const NetworkParams& params, int iters, std::uint64_t seed) {
  params.check_consistent();
  if (params.depth() == 0) throw DimensionError("empty network has no linear map");
  Matrix P = linear_part(params, 0);
  for (std::size_t k = 1; k < params.depth(); ++k) P = matmul(linear_part(params, k), P);
  return spectral_norm(P, iters, seed);
}

RelaxationSolution arovr_objective(const QuadraticRelaxationInstance& inst, double alpha,
                                   double beta) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  double abar = 1.0 - alpha;
  RelaxationSolution sol;
  sol.s_plus = coefficient_argmin(inst, alpha, beta);
  sol.s_minus = coefficient_argmin(inst, -abar, beta);
  sol.objective = alpha * quad_value(inst.H_l, inst.b_l, sol.s_plus) +
                  abar * quad_value(inst.H_l, inst.b_l, sol.s_minus) +
                  (quad_value(inst.H_E, inst.b_E, sol.s_plus) -
                   quad_value(inst.H_E, inst.b_E, sol.s_minus)) /
                      beta;
  return sol;
}

RelaxationSolution sprovr_objective(const QuadraticRelaxationInstance& inst, double alpha,
                                    double beta) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  double abar = 1.0 - alpha;
  Matrix A = add(scale(inst.H_l, 2.0 * alpha - 1.0), scale(inst.H_E, 1.0 / beta));
  Vector rhs = axpy(scale(inst.b_E, -1.0 / beta), -(2.0 * alpha - 1.0), inst.b_l);
  Vector s_mean;
  try {
    s_mean = solve(A, rhs);
  } catch (const SingularMatrix&) {
    throw SingularSystem("coupled stationarity system is singular");
  }
  Vector grad_loss = axpy(inst.b_l, 1.0, matvec(inst.H_l, s_mean));
  Vector delta = solve(inst.H_E, scale(grad_loss, -beta));
  RelaxationSolution sol;
  sol.s_plus = axpy(s_mean, abar, delta);
  sol.s_minus = axpy(s_mean, -alpha, delta);
  sol.objective = quad_value(inst.H_l, inst.b_l, s_mean) +
                  (quad_value(inst.H_E, inst.b_E, sol.s_plus) -
                   quad_value(inst.H_E, inst.b_E, sol.s_minus)) /
                      beta;
  return sol;
}

std::vector<QuadraticRelaxationInstance> random_relaxation_instances(int count,
                                                                     std::uint64_t seed,
                                                                     std::size_t max_dim) {
  if (count < 0 || max_dim == 0) throw std::invalid_argument("bad battery size");
  Rng rng(seed);
  std::vector<QuadraticRelaxationInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::size_t d = 1 + (static_cast<std::size_t>(i) % max_dim);
    QuadraticRelaxationInstance inst;
    inst.H_E = random_strongly_convex(rng, d);
    inst.H_l = random_loss_curvature(rng, d);
    // The loss keeps no linear term: real losses are nonnegative, and the
    // beta-monotonicity of beta*J rests on that (its beta-derivative is J,
    // an average of loss values along the coefficient path). A loss aimed at
    // a nonzero target is the same instance with the target folded into b_E,
    // so zeroing b_l loses no generality.
    inst.b_l = Vector(d, 0.0);
    inst.b_E = gaussian_vector(rng, d);
    out.push_back(std::move(inst));
  }
  return out;
}

PropositionReport check_prop1(const std::vector<QuadraticRelaxationInstance>& instances,
                              const std::vector<double>& alpha_grid,
                              const std::vector<double>& beta_grid, double tol) {
  std::vector<double> alphas = alpha_grid;
  std::vector<double> betas = beta_grid;
  std::sort(alphas.begin(), alphas.end());
  std::sort(betas.begin(), betas.end());

  PropositionReport rep;
  rep.instance_count = static_cast<int>(instances.size());
  OrderingTally tally;

  for (std::size_t i = 0; i < instances.size(); ++i) {
    const QuadraticRelaxationInstance& inst = instances[i];
    // J over the grid; remember it per beta for the ordering record and per
    // alpha for the beta*J comparison.
    std::vector<std::vector<double>> J(betas.size(), std::vector<double>(alphas.size()));
    for (std::size_t bi = 0; bi < betas.size(); ++bi) {
      for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        J[bi][ai] = arovr_objective(inst, alphas[ai], betas[bi]).objective;
        rep.samples.push_back({static_cast<int>(i), alphas[ai], betas[bi], J[bi][ai]});
      }
      tally.feed(J[bi]);

      // Chained ordering of solution losses: for alpha <= alpha', the
      // minimizer's loss is non-increasing in the loss coefficient, so
      // l(c=alpha') <= l(c=alpha) <= l(c=-(1-alpha')) <= l(c=-(1-alpha)).
      for (std::size_t a1 = 0; a1 < alphas.size(); ++a1) {
        for (std::size_t a2 = a1; a2 < alphas.size(); ++a2) {
          double lo = alphas[a1], hi = alphas[a2];
          double l_hi = loss_at_coefficient(inst, hi, betas[bi]);
          double l_lo = loss_at_coefficient(inst, lo, betas[bi]);
          double l_mhi = loss_at_coefficient(inst, -(1.0 - hi), betas[bi]);
          double l_mlo = loss_at_coefficient(inst, -(1.0 - lo), betas[bi]);
          require_leq(rep, l_hi, l_lo, tol);
          require_leq(rep, l_lo, l_mhi, tol);
          require_leq(rep, l_mhi, l_mlo, tol);
        }
      }
    }

    // beta * J non-decreasing in beta at fixed alpha.
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
      for (std::size_t b1 = 0; b1 + 1 < betas.size(); ++b1) {
        for (std::size_t b2 = b1 + 1; b2 < betas.size(); ++b2) {
          require_leq(rep, betas[b1] * J[b1][ai], betas[b2] * J[b2][ai], tol);
        }
      }
    }
  }

  rep.ordering_direction = tally.direction(tol);
  rep.pass = rep.violations == 0;
  return rep;
}

PropositionReport check_prop2(const std::vector<QuadraticRelaxationInstance>& instances,
                              double coupling, const std::vector<double>& betas_in,
                              double tol) {
  if (!(coupling > 0.0)) throw std::invalid_argument("coupling must be positive");
  std::vector<double> betas = betas_in;
  std::sort(betas.begin(), betas.end());
  for (double b : betas) {
    if (!(b >= coupling)) {
      throw std::invalid_argument("every beta must be at least the coupling product");
    }
  }

  PropositionReport rep;
  rep.instance_count = static_cast<int>(instances.size());
  OrderingTally tally;

  for (std::size_t i = 0; i < instances.size(); ++i) {
    std::vector<double> J(betas.size());
    for (std::size_t bi = 0; bi < betas.size(); ++bi) {
      double alpha = 1.0 - coupling / betas[bi];
      J[bi] = arovr_objective(instances[i], alpha, betas[bi]).objective;
      rep.samples.push_back({static_cast<int>(i), alpha, betas[bi], J[bi]});
    }
    tally.feed(J);
    // Larger beta (with the adversarial weight pinned) relaxes less.
    for (std::size_t b1 = 0; b1 + 1 < betas.size(); ++b1) {
      for (std::size_t b2 = b1 + 1; b2 < betas.size(); ++b2) {
        require_leq(rep, J[b2], J[b1], tol);
      }
    }
  }

  rep.ordering_direction = tally.direction(tol);
  rep.pass = rep.violations == 0;
  return rep;
}

std::vector<TrilevelInstance> random_trilevel_instances(int count, std::uint64_t seed,
                                                        std::size_t max_y_dim,
                                                        std::size_t max_z_dim) {
  if (count < 0 || max_y_dim == 0 || max_z_dim == 0) {
    throw std::invalid_argument("bad battery size");
  }
  Rng rng(seed);
  std::vector<TrilevelInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::size_t y = 1 + rng.index(max_y_dim);
    std::size_t z = 1 + rng.index(max_z_dim);
    TrilevelInstance inst;
    inst.H_l = random_loss_curvature(rng, y);
    inst.H_F = random_strongly_convex(rng, y);
    inst.H_G = random_strongly_convex(rng, z);
    inst.b_l = gaussian_vector(rng, y);
    inst.b_F = gaussian_vector(rng, y);
    inst.b_G = gaussian_vector(rng, z);
    inst.W = scale(gaussian_matrix(rng, y, z),
                   1.0 / std::sqrt(static_cast<double>(std::max(y, z))));
    inst.x = gaussian_vector(rng, z);
    out.push_back(std::move(inst));
  }
  return out;
}

DeltaClosedForm arovr_delta_closed_form(const TrilevelInstance& inst, double alpha,
                                        double beta) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  double abar = 1.0 - alpha;
  Matrix Hl = scale(inst.H_l, beta);
  Vector bl = scale(inst.b_l, beta);
  Matrix A_plus_inv = inverse(add(inst.H_F, scale(Hl, alpha)));
  Matrix A_minus_inv = inverse(sub(inst.H_F, scale(Hl, abar)));
  DeltaClosedForm cf;
  cf.M = scale(matmul(A_plus_inv, matmul(Hl, A_minus_inv)), -1.0);
  // Offset coefficient on the loss shift: alpha*Ap^{-1} + (1-alpha)*Am^{-1},
  // which collapses to Ap^{-1} H_F Am^{-1}.
  Matrix M_off = matmul(A_plus_inv, matmul(inst.H_F, A_minus_inv));
  cf.v = sub(scale(matvec(cf.M, inst.b_F), -1.0), matvec(M_off, bl));
  return cf;
}

DeltaClosedForm sprovr_delta_closed_form(const TrilevelInstance& inst, double alpha,
                                         double beta) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  Matrix Hl = scale(inst.H_l, beta);
  Vector bl = scale(inst.b_l, beta);
  Matrix A_inv = inverse(add(scale(Hl, 2.0 * alpha - 1.0), inst.H_F));
  Matrix HF_inv = inverse(inst.H_F);
  DeltaClosedForm cf;
  cf.M = scale(matmul(HF_inv, matmul(Hl, A_inv)), -1.0);
  Vector shift = axpy(inst.b_F, 2.0 * alpha - 1.0, bl);
  cf.v = sub(scale(matvec(cf.M, shift), -1.0), matvec(HF_inv, bl));
  return cf;
}

FixedPointReport trilevel_fixed_point_check(const TrilevelInstance& inst, double alpha,
                                            double beta, double alpha_prime, int iters,
                                            RelaxationVariant variant) {
  if (!(alpha_prime >= 0.0 && alpha_prime <= 1.0)) {
    throw std::invalid_argument("alpha_prime must lie in [0, 1]");
  }
  if (iters < 1) throw std::invalid_argument("need at least one iteration");

  DeltaClosedForm cf = variant == RelaxationVariant::Averaged
                           ? arovr_delta_closed_form(inst, alpha, beta)
                           : sprovr_delta_closed_form(inst, alpha, beta);

  FixedPointReport rep;
  {
    // Linear map governing the mean state: (2a'-1) H_G^{-1} W^T M W.
    Matrix T = scale(
        matmul(inverse(inst.H_G), matmul(transpose(inst.W), matmul(cf.M, inst.W))),
        2.0 * alpha_prime - 1.0);
    rep.spectral_factor = gelfand_radius(T);
  }

  double ap = alpha_prime;
  double am = 1.0 - alpha_prime;
  double abar = 1.0 - alpha;
  Matrix Hl = scale(inst.H_l, beta);
  Vector bl = scale(inst.b_l, beta);
  Matrix A_plus = add(inst.H_F, scale(Hl, alpha));
  Matrix A_minus = sub(inst.H_F, scale(Hl, abar));
  Matrix A_mean = add(scale(Hl, 2.0 * alpha - 1.0), inst.H_F);

  Vector base = sub(inst.x, inst.b_G);
  Vector z_mean = solve(inst.H_G, base);
  double init_norm = norm2(z_mean);

  for (int t = 1; t <= iters; ++t) {
    // Head difference from direct solves of the perturbed minimizations.
    Vector drive = sub(matvec(inst.W, z_mean), inst.b_F);
    Vector d;
    if (variant == RelaxationVariant::Averaged) {
      Vector y_plus = solve(A_plus, axpy(drive, -alpha, bl));
      Vector y_minus = solve(A_minus, axpy(drive, abar, bl));
      d = sub(y_plus, y_minus);
    } else {
      Vector y_mean = solve(A_mean, axpy(drive, -(2.0 * alpha - 1.0), bl));
      d = solve(inst.H_F, scale(axpy(bl, 1.0, matvec(Hl, y_mean)), -1.0));
    }

    Vector feedback = matvec_transposed(inst.W, d);
    Vector z_plus = solve(inst.H_G, axpy(base, ap, feedback));
    Vector z_minus = solve(inst.H_G, axpy(base, -am, feedback));
    Vector next = add(scale(z_plus, ap), scale(z_minus, am));

    rep.fixed_point_residual = norm2(sub(next, z_mean));
    rep.iterations = t;
    z_mean = std::move(next);

    if (!all_finite(z_mean) || norm2(z_mean) > 1e8 * (1.0 + init_norm)) {
      rep.diverged = true;
      break;
    }
    if (rep.fixed_point_residual < 1e-12) break;
  }

  rep.z_mean = std::move(z_mean);
  return rep;
}

double bregman_gap(const ActivationKind& kind, const Vector& s_plus, const Vector& s_minus,
                   double alpha) {
  if (s_plus.size() != s_minus.size()) throw DimensionError("dyadic states differ in size");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");

  double gap = 0.0;
  if (kind.quadratic_indicator()) {
    // G = ||.||^2/2 + indicator(C): D_G(u||v) = ||u - v||^2 / 2 on C.
    for (std::size_t i = 0; i < s_plus.size(); ++i) {
      if (!kind.feasible(s_plus[i]) || !kind.feasible(s_minus[i])) {
        throw InfeasibleState("bregman gap: state outside the activation's feasible set");
      }
      double mean = alpha * s_plus[i] + (1.0 - alpha) * s_minus[i];
      double dp = s_plus[i] - mean;
      double dm = s_minus[i] - mean;
      gap += 0.5 * dp * dp - 0.5 * dm * dm;
    }
    return gap;
  }

  // Leaky-relu: G(s) = s^2/2 on s >= 0, s^2/(2*slope) below, with gradient
  // s resp. s/slope, both continuous at zero.
  auto pot = [&](double s) { return s >= 0.0 ? 0.5 * s * s : 0.5 * s * s / kind.slope; };
  auto dpot = [&](double s) { return s >= 0.0 ? s : s / kind.slope; };
  for (std::size_t i = 0; i < s_plus.size(); ++i) {
    double p = s_plus[i];
    double m = s_minus[i];
    double mean = alpha * p + (1.0 - alpha) * m;
    gap += pot(p) - pot(m) - dpot(mean) * (p - m);
  }
  return gap;
}

}  // namespace dualprop
