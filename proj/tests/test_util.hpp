#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "flowgate/autodiff.hpp"
#include "flowgate/rng.hpp"
#include "flowgate/tensor.hpp"

namespace testutil {

inline double rel_err(double got, double want) {
  const double scale = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / scale;
}

inline flowgate::Tensor random_tensor(const flowgate::Shape& shape, flowgate::Rng& rng, double lo = -1.0,
                                      double hi = 1.0) {
  flowgate::Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.next_double();
  return t;
}

inline double max_abs_diff(const flowgate::Tensor& a, const flowgate::Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Central finite differences of a scalar function w.r.t. one mutable
/// parameter tensor. The function must re-evaluate from scratch.
inline flowgate::Tensor finite_difference_grad(flowgate::Parameter& p, const std::function<double()>& f,
                                               double step = 1e-5) {
  flowgate::Tensor grad(p.value.shape());
  for (std::int64_t i = 0; i < p.value.size(); ++i) {
    const double saved = p.value[i];
    p.value[i] = saved + step;
    const double up = f();
    p.value[i] = saved - step;
    const double down = f();
    p.value[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Max relative error between an analytic gradient and central
/// differences, coordinate-wise with an absolute floor.
inline double grad_rel_err(const flowgate::Tensor& analytic, const flowgate::Tensor& numeric, double floor = 1e-6) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max(std::abs(numeric[i]), floor);
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace testutil
