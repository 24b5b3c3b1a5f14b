#pragma once

#include <cmath>

#include "psad/ad.hpp"
#include "psad/rng.hpp"

namespace psad::init {

inline ad::Matrix normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  ad::Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal(0.0, stddev);
  return m;
}

/// Glorot-uniform for a fan_in x fan_out weight.
inline ad::Matrix xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  ad::Matrix m(fan_in, fan_out);
  for (double& v : m.data) v = rng.uniform(-limit, limit);
  return m;
}

}  // namespace psad::init
