#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "advfusion/autodiff.hpp"

namespace advf {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  bool aborted = false;  // non-finite function output
  std::vector<int64_t> excluded;  // coordinates sitting on a kink
  int64_t worst_coord = -1;
};

// Compares backward() gradients of a scalar-valued f against central finite
// differences, coordinate by coordinate. Coordinates where the one-sided
// differences disagree badly (a kink within eps) are excluded rather than
// failed. Near-zero gradient pairs are compared absolutely.
inline GradCheckReport grad_check(const std::function<Value(const Value&)>& f, const Tensor& x,
                                  double eps = 1e-4, double tol = 1e-5) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
  GradCheckReport rep;

  Value leaf = make_leaf(x);
  Value y = f(leaf);
  if (y->t.numel() != 1 || !std::isfinite(y->t.data[0])) {
    rep.aborted = true;
    return rep;
  }
  backward(y);
  Tensor analytic = leaf->grad.data.empty() ? Tensor(x.shape, 0.0) : leaf->grad;

  auto eval = [&](const Tensor& xt) -> double {
    Value v = make_const(xt);
    return f(v)->t.data[0];
  };

  double f0 = y->t.data[0];
  Tensor xt = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double orig = xt.data[i];
    xt.data[i] = orig + eps;
    double fp = eval(xt);
    xt.data[i] = orig - eps;
    double fm = eval(xt);
    xt.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.aborted = true;
      return rep;
    }
    double dplus = (fp - f0) / eps;
    double dminus = (f0 - fm) / eps;
    double scale = std::max({std::abs(dplus), std::abs(dminus), 1.0});
    if (std::abs(dplus - dminus) > 0.05 * scale + 10 * eps) {
      rep.excluded.push_back(i);
      continue;
    }
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic.data[i];
    double denom = std::max(std::abs(a), std::abs(numeric));
    double err = denom > 1e-4 ? std::abs(a - numeric) / denom : std::abs(a - numeric);
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_coord = i;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace advf
