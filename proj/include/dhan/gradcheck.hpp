#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <utility>
#include <vector>

#include "dhan/tensor.hpp"

namespace dhan {

template <class U, class T>
Tensor<U> cast(const Tensor<T>& t, bool requires_grad = false) {
  return Tensor<U>(t.shape(), std::vector<U>(t.data().begin(), t.data().end()), requires_grad);
}

struct GradCheckReport {
  double componentwise = 0.0;  // max_i |a_i - n_i| / max(|a_i|, 1e-8)
  double normwise = 0.0;       // max_i |a_i - n_i| / max(max_j |n_j|, 1e-8)
};

// Compares the reverse-mode gradient of a scalar map against central
// differences.
//
// The numeric quotient divides by the perturbation actually representable,
// (x+h) - (x-h), rather than the nominal 2h. When T is float and f also
// accepts Tensor<double>, the differences are taken on the 64-bit
// instantiation: float storage rounding (~6e-8 per element) divided by 2h
// would otherwise swamp a 1e-4 tolerance. The analytic side always runs in T.
// A NaN anywhere propagates to both results.
template <class T, class F>
GradCheckReport finite_diff_report(F&& f, const Tensor<T>& x, double step) {
  constexpr double kFloor = 1e-8;
  constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
  using Ref = std::conditional_t<std::is_same_v<T, float> && std::is_invocable_v<F&, const Tensor<double>&>, double, T>;

  Tensor<T> probe = cast<T>(x, true);
  Tensor<T> root = f(probe);
  backward(root);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  Tensor<Ref> moved = cast<Ref>(x);
  GradCheckReport r;
  double worst_abs = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < moved.numel(); ++i) {
    const Ref base = moved.data()[i];
    const Ref up = static_cast<Ref>(static_cast<double>(base) + step);
    const Ref down = static_cast<Ref>(static_cast<double>(base) - step);
    moved.data_mut()[i] = up;
    const double f_up = static_cast<double>(f(moved).item());
    moved.data_mut()[i] = down;
    const double f_down = static_cast<double>(f(moved).item());
    moved.data_mut()[i] = base;
    const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double diff = std::abs(analytic[i] - numeric);
    const double err = diff / std::max(std::abs(analytic[i]), kFloor);
    if (std::isnan(err)) return {kNaN, kNaN};
    r.componentwise = std::max(r.componentwise, err);
    worst_abs = std::max(worst_abs, diff);
    scale = std::max(scale, std::abs(numeric));
  }
  r.normwise = worst_abs / std::max(scale, kFloor);
  return r;
}

// Max componentwise relative error; see finite_diff_report.
template <class T, class F>
double finite_diff_check(F&& f, const Tensor<T>& x, double step) {
  return finite_diff_report(std::forward<F>(f), x, step).componentwise;
}

}  // namespace dhan
