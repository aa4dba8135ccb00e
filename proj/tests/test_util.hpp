#pragma once

#include <random>

#include "seld/tensor.hpp"

namespace seld::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Uniform values with magnitude in [min_abs, max_abs] and random sign.
inline Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape, double min_abs, double max_abs) {
  std::uniform_real_distribution<double> u(min_abs, max_abs);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

}  // namespace seld::testing
