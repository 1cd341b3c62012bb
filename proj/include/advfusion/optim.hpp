#pragma once

#include <cmath>
#include <map>
#include <string>

#include "advfusion/autodiff.hpp"

namespace advf {

// Adaptive-moment estimation state for a single tensor.
struct AdamState {
  Tensor m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  // One update in place; grad must match value's shape.
  void update(Tensor& value, const Tensor& grad, double lr) {
    if (m.data.empty()) {
      m = Tensor(value.shape);
      v = Tensor(value.shape);
    }
    ++step;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < value.data.size(); ++i) {
      double g = grad.data[i];
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
      value.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps);
    }
  }
};

// Per-name Adam states for a parameter dictionary.
struct AdamOptimizer {
  std::map<std::string, AdamState> states;
  double lr = 1e-3;

  void step(std::map<std::string, Value>& params) {
    for (auto& [name, p] : params) {
      if (!p->requires_grad || p->grad.data.empty()) continue;
      states[name].update(p->t, p->grad, lr);
    }
  }
};

}  // namespace advf
