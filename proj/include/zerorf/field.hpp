#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "zerorf/tensor.hpp"

namespace zerorf {

enum class FactorMode { kVM, kTriplane };

std::string to_string(FactorMode mode);

// Vector-matrix factorized feature volume over the cube [-r, r]^3:
//
//   F(x,y,z)[c] = v0[c](x) M0[c](y,z) + v1[c](y) M1[c](x,z) + v2[c](z) M2[c](x,y)
//
// Pair a couples the vector along axis a with the matrix over the remaining
// two axes in ascending order. In triplane mode every vector is the constant
// 1 and is not a trainable tensor.
template <typename T>
struct FactorizedField {
  FactorMode mode = FactorMode::kVM;
  double half_extent = 1.5;
  std::array<Tensor<T>, 3> vectors;   // [C, R]
  std::array<Tensor<T>, 3> matrices;  // [C, R, R]

  std::size_t channels() const { return matrices[0].size(0); }
  std::size_t resolution() const { return matrices[0].size(1); }

  // Throws std::invalid_argument on inconsistent channel counts,
  // resolutions, or non-unit triplane vectors.
  void validate() const;
};

// Matrix axes of pair a.
inline constexpr std::array<std::array<std::size_t, 2>, 3> kMatrixAxes{{{1, 2}, {0, 2}, {0, 1}}};

// Vectors fixed at 1 and excluded from differentiation.
template <typename T>
std::array<Tensor<T>, 3> unit_vectors(std::size_t channels, std::size_t resolution);

// Per-point feature lookup. `points` holds P world-space positions as xyz
// triples, all inside the bounding cube (callers mask the rest). Returns
// [P, C], differentiable with respect to the factor tensors.
template <typename T>
Tensor<T> sample_field(const FactorizedField<T>& field, std::span<const T> points);

// Explicit outer-product sum over all grid nodes, [C, R, R, R] indexed
// (c, x, y, z). Cubic in R; refuses R > 32.
template <typename T>
Tensor<T> dense_reconstruct(const FactorizedField<T>& field);

inline constexpr std::size_t kDenseReconstructMaxResolution = 32;

// World position of grid node i along any axis.
double node_position(std::size_t i, std::size_t resolution, double half_extent);

}  // namespace zerorf
