#pragma once

#include "dualprop/linalg.hpp"

namespace dualprop {

// Output-layer losses, always carrying their nudge weight beta:
//   least squares:  (beta/2) ||s - y||^2
//   cross entropy:  beta * CE(softmax(s), y)
// The "unweighted" variants drop the beta factor; the gradient-style oracles
// compare against those. Softmax lives inside the loss -- it is never a layer
// activation.
struct LossKind {
  enum class Family { LeastSquares, CrossEntropy };

  Family family = Family::LeastSquares;
  double beta = 0.5;

  static LossKind least_squares(double beta) { return {Family::LeastSquares, beta}; }
  static LossKind cross_entropy(double beta) { return {Family::CrossEntropy, beta}; }

  double value(const Vector& s, const Vector& y) const { return beta * unweighted_value(s, y); }
  Vector gradient(const Vector& s, const Vector& y) const {
    return scale(unweighted_gradient(s, y), beta);
  }

  double unweighted_value(const Vector& s, const Vector& y) const;
  Vector unweighted_gradient(const Vector& s, const Vector& y) const;
};

// Numerically safe softmax (shifted by the max before exponentiation).
Vector softmax(const Vector& s);
double log_sum_exp(const Vector& s);

}  // namespace dualprop
