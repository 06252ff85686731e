#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "support/gradcheck.hpp"
#include "zerorf/field.hpp"

namespace zerorf::testing {

inline FactorizedField<double> random_field(std::mt19937_64& rng, FactorMode mode, std::size_t channels,
                                            std::size_t resolution, double half_extent = 1.5,
                                            bool requires_grad = false) {
  FactorizedField<double> f;
  f.mode = mode;
  f.half_extent = half_extent;
  for (std::size_t a = 0; a < 3; ++a) {
    f.matrices[a] = random_tensor(rng, {channels, resolution, resolution}, -1, 1, requires_grad);
    f.vectors[a] = random_tensor(rng, {channels, resolution}, -1, 1, requires_grad);
  }
  if (mode == FactorMode::kTriplane) f.vectors = unit_vectors<double>(channels, resolution);
  return f;
}

// Literal evaluation of the vector-matrix sum by accumulating each outer
// product into a zero tensor, [C, R, R, R].
inline std::vector<double> literal_vm_sum(const FactorizedField<double>& f) {
  const std::size_t ch = f.channels(), r = f.resolution();
  std::vector<double> dense(ch * r * r * r, 0.0);
  auto at = [&](std::size_t c, std::size_t x, std::size_t y, std::size_t z) -> double& {
    return dense[((c * r + x) * r + y) * r + z];
  };
  for (std::size_t pair = 0; pair < 3; ++pair) {
    auto v = f.vectors[pair].values();
    auto m = f.matrices[pair].values();
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t a = 0; a < r; ++a) {
        for (std::size_t b = 0; b < r; ++b) {
          for (std::size_t d = 0; d < r; ++d) {
            const double value = v[c * r + a] * m[(c * r + b) * r + d];
            if (pair == 0) at(c, a, b, d) += value;
            if (pair == 1) at(c, b, a, d) += value;
            if (pair == 2) at(c, b, d, a) += value;
          }
        }
      }
    }
  }
  return dense;
}

// World positions of all R^3 nodes in (x, y, z) row-major order.
inline std::vector<double> node_points(std::size_t r, double half_extent) {
  std::vector<double> pts;
  pts.reserve(3 * r * r * r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < r; ++k) {
        pts.push_back(node_position(i, r, half_extent));
        pts.push_back(node_position(j, r, half_extent));
        pts.push_back(node_position(k, r, half_extent));
      }
  return pts;
}

// max |sample_field(node) - dense_reconstruct(node)| over all nodes/channels.
inline double node_oracle_error(const FactorizedField<double>& f) {
  const std::size_t ch = f.channels(), r = f.resolution();
  auto pts = node_points(r, f.half_extent);
  auto sampled = sample_field<double>(f, pts);
  auto dense = dense_reconstruct(f);
  double worst = 0.0;
  for (std::size_t n = 0; n < r * r * r; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      worst = std::max(worst, std::abs(sampled.values()[n * ch + c] - dense.values()[c * r * r * r + n]));
    }
  }
  return worst;
}

}  // namespace zerorf::testing
