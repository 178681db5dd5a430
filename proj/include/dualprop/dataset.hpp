#pragma once

#include <vector>

#include "dualprop/linalg.hpp"

namespace dualprop {

// Flat-vector samples with integer class labels.
struct Dataset {
  std::vector<Vector> samples;
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const { return samples.size(); }
  std::size_t dim() const { return samples.empty() ? 0 : samples.front().size(); }
};

inline Vector one_hot(int label, int classes) {
  Vector y(static_cast<std::size_t>(classes), 0.0);
  y[static_cast<std::size_t>(label)] = 1.0;
  return y;
}

}  // namespace dualprop
