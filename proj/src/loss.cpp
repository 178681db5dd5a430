#include "dualprop/loss.hpp"

#include <algorithm>
#include <cmath>

namespace dualprop {

double log_sum_exp(const Vector& s) {
  double m = *std::max_element(s.begin(), s.end());
  double acc = 0.0;
  for (double x : s) acc += std::exp(x - m);
  return m + std::log(acc);
}

Vector softmax(const Vector& s) {
  double m = *std::max_element(s.begin(), s.end());
  Vector p(s.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    p[i] = std::exp(s[i] - m);
    acc += p[i];
  }
  for (double& x : p) x /= acc;
  return p;
}

double LossKind::unweighted_value(const Vector& s, const Vector& y) const {
  if (s.size() != y.size()) throw DimensionError("loss: size mismatch");
  switch (family) {
    case Family::LeastSquares: {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        double d = s[i] - y[i];
        acc += d * d;
      }
      return 0.5 * acc;
    }
    case Family::CrossEntropy: {
      // sum_i y_i (logsumexp(s) - s_i); exact for one-hot y, and the natural
      // extension for soft targets
      double lse = log_sum_exp(s);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) acc += y[i] * (lse - s[i]);
      return acc;
    }
  }
  return 0.0;
}

Vector LossKind::unweighted_gradient(const Vector& s, const Vector& y) const {
  if (s.size() != y.size()) throw DimensionError("loss: size mismatch");
  switch (family) {
    case Family::LeastSquares: return sub(s, y);
    case Family::CrossEntropy: {
      double mass = 0.0;
      for (double v : y) mass += v;
      Vector g = softmax(s);
      for (std::size_t i = 0; i < s.size(); ++i) g[i] = mass * g[i] - y[i];
      return g;
    }
  }
  return Vector(s.size(), 0.0);
}

}  // namespace dualprop
