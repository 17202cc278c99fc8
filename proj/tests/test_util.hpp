#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ikd/tensor.hpp"

namespace ikd::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                        double hi = 1.0, bool requires_grad = true) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * uniform01(rng()));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

inline std::size_t rand_extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + rng() % (hi - lo + 1);
}

}  // namespace ikd::testing
