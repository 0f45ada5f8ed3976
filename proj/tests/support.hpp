#pragma once

// Test helpers that do not depend on GoogleTest; shared by the unit tests
// and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "dhan/gradcheck.hpp"
#include "dhan/layers.hpp"
#include "dhan/tensor.hpp"

namespace dhan::test {

// Step and tolerance for central-difference checks per storage type.
template <class T>
struct GradTolerance;
template <>
struct GradTolerance<float> {
  static constexpr double step = 1e-3;
  static constexpr double tol = 1e-4;
};
template <>
struct GradTolerance<double> {
  static constexpr double step = 1e-5;
  static constexpr double tol = 1e-6;
};

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), grad);
}

// Pushes components out of (-margin, margin) so a central difference does not
// straddle the kink of relu-like functions.
template <class T>
Tensor<T> away_from_zero(Tensor<T> t, double margin = 0.05) {
  for (auto& v : t.data_mut()) {
    if (std::abs(static_cast<double>(v)) < margin) v = static_cast<T>(v < 0 ? v - margin : v + margin);
  }
  return t;
}

// Values pairwise at least `spacing` apart (shuffled grid), so max-pooling
// has no near-ties within the difference step.
template <class T>
Tensor<T> distinct_values(Shape shape, std::mt19937_64& rng, double spacing = 0.01) {
  std::vector<T> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((static_cast<double>(i) - v.size() / 2.0) * spacing);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// sum(y * w) for a fixed weighting w: turns any output into a scalar whose
// gradient exercises every output component differently.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& w) {
  return sum(mul(y, w));
}

// Scalar type of a tensor expression; lets generic lambdas recast fixed operands.
template <class V>
using scalar_of = typename std::decay_t<V>::value_type;

// Copies parameter values between two identically built models of any
// storage types, in collection order.
template <class Dst, class Src>
void copy_param_values(ParamList<Dst> dst, const ParamList<Src>& src) {
  if (dst.size() != src.size()) throw std::logic_error("copy_param_values: parameter counts differ");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (dst[k].name != src[k].name) throw std::logic_error("copy_param_values: " + dst[k].name + " vs " + src[k].name);
    auto to = dst[k].tensor.data_mut();
    auto from = src[k].tensor.data();
    if (to.size() != from.size()) throw std::logic_error("copy_param_values: size mismatch for " + dst[k].name);
    for (std::size_t i = 0; i < to.size(); ++i) to[i] = static_cast<Dst>(from[i]);
  }
}

}  // namespace dhan::test
