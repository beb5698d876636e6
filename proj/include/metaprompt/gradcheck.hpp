#pragma once

// Central finite differences. This is the independent oracle the autodiff
// engine is validated against; it only ever calls the function forward, never
// the backward machinery.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "metaprompt/common.hpp"
#include "metaprompt/tensor.hpp"

namespace metaprompt {

using ScalarFn = std::function<double(const Tensor&)>;

inline Tensor finite_diff_grad(const ScalarFn& f, const Tensor& point,
                               double epsilon) {
  if (epsilon <= 0.0) {
    throw std::invalid_argument("finite_diff_grad: epsilon must be positive");
  }
  const std::vector<double>& x = point.values();
  std::vector<double> grad(x.size());
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + epsilon;
    const double hi = f(Tensor::constant(point.shape(), probe));
    probe[i] = x[i] - epsilon;
    const double lo = f(Tensor::constant(point.shape(), probe));
    probe[i] = x[i];
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NonFiniteError("finite_diff_grad: non-finite function value");
    }
    grad[i] = (hi - lo) / (2.0 * epsilon);
  }
  return Tensor::constant(point.shape(), std::move(grad));
}

// Largest elementwise relative error between two gradients, with an absolute
// floor so near-zero entries do not blow up the ratio.
inline double max_relative_error(const std::vector<double>& a,
                                 const std::vector<double>& b,
                                 double floor = 1e-8) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("max_relative_error: size mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace metaprompt
