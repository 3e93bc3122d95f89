#pragma once

#include <cmath>
#include <vector>

#include "diffsr/error.hpp"

namespace diffsr::nn {

/// Sinusoidal step embedding: for k = 1..dim/2, element 2(k-1) is sin(t / 10000^(2k/dim))
/// and element 2(k-1)+1 the matching cosine. The lowest frequency is always 1/10000.
inline std::vector<double> time_embed(int t, int dim, int steps) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::InvalidArgument, "time embedding width must be even, got " + std::to_string(dim));
  require(t >= 0 && t <= steps, ErrorKind::OutOfRange,
          "time step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int k = 0; k < dim / 2; ++k) {
    const double freq = std::pow(10000.0, -2.0 * (k + 1) / dim);
    out[2 * static_cast<std::size_t>(k)] = std::sin(t * freq);
    out[2 * static_cast<std::size_t>(k) + 1] = std::cos(t * freq);
  }
  return out;
}

}  // namespace diffsr::nn
