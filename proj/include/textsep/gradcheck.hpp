#pragma once

#include <vector>

#include "textsep/tensor.hpp"

namespace textsep::diff {

// Compares reverse-mode gradients of a scalar function against central finite
// differences, perturbing every element of every leaf in place. fn() must
// rebuild its graph from the leaves' current values on each call.
//
// Returns the worst |analytic - fd| normalized by the largest gradient
// magnitude encountered across all leaves (per-coordinate relative error is
// meaningless around zero entries, and a global scale still flags any
// individually wrong coordinate).
template <typename Fn>
double grad_check(Fn&& fn, std::vector<Tensor<double>> leaves, double eps = 1e-5) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  auto loss = fn();
  if (loss.size() != 1) throw ShapeError("grad_check: fn must return a scalar");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.grad());

  std::vector<std::vector<double>> fd(leaves.size());
  {
    NoGradGuard ng;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      auto& vals = leaves[li].values();
      fd[li].resize(vals.size());
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + eps;
        const double up = fn().item();
        vals[i] = orig - eps;
        const double down = fn().item();
        vals[i] = orig;
        fd[li][i] = (up - down) / (2.0 * eps);
      }
    }
  }

  double scale = 1e-12;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < fd[li].size(); ++i) {
      scale = std::max(scale, std::abs(analytic[li][i]));
      scale = std::max(scale, std::abs(fd[li][i]));
    }
  }
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < fd[li].size(); ++i) {
      worst = std::max(worst, std::abs(analytic[li][i] - fd[li][i]) / scale);
    }
  }
  return worst;
}

}  // namespace textsep::diff
