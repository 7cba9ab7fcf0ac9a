#pragma once

#include <cstddef>
#include <random>
#include <span>

namespace camforge::detail {

/// Draws an index with probability proportional to `weights`. Returns
/// weights.size() when the total mass is zero.
inline std::size_t sample_weighted(std::mt19937_64& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) return weights.size();
  const double target = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0.0;
  std::size_t last_positive = weights.size();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

}  // namespace camforge::detail
