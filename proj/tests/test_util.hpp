#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "mta/tensor.hpp"

namespace mta::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

/// Central difference of a scalar function along coordinate i of x.
inline double central_difference(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t i,
                                 double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/// |a - b| <= rel * max(|a|, |b|) + abs_floor
inline bool close(double a, double b, double rel, double abs_floor = 0.0) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

}  // namespace mta::testing
