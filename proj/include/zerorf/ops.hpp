#pragma once

#include <span>
#include <vector>

#include "zerorf/tensor.hpp"

// Differentiable operations. Every op computes its output eagerly and, when
// a tape is active and any input requires a gradient, appends a backward
// node to that tape. Shape errors throw std::invalid_argument naming the op
// and the offending shapes.
namespace zerorf::ops {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

// Full reductions; the result has shape {1}.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// [M,K] x [K,N] -> [M,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[M,K] * w[K,N] + bias[N]. Fused form of matmul + broadcast + add that
// avoids materializing the broadcast bias. `bias` may be undefined.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Numpy-style broadcast to `shape` (trailing dimensions aligned).
template <typename T> Tensor<T> broadcast(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// Rows of x (axis 0) selected by `indices`.
template <typename T>
Tensor<T> index_gather(const Tensor<T>& x, std::span<const std::size_t> indices);

enum class PadMode { kZero, kReplicate };

struct ConvOptions {
  std::size_t padding = 0;
  PadMode pad_mode = PadMode::kZero;
};

// x[Cin,L], w[Cout,Cin,K], bias[Cout] (optional) -> [Cout, L + 2p - K + 1]
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 ConvOptions options = {});

// x[Cin,H,W], w[Cout,Cin,K,K], bias[Cout] (optional)
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 ConvOptions options = {});

// [C,L] -> [C,2L] or [C,H,W] -> [C,2H,2W].
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);
// Same shapes, linear/bilinear with half-pixel centers and edge clamping.
template <typename T> Tensor<T> upsample_linear2x(const Tensor<T>& x);

// x[C, spatial...]; gamma, beta [C]. `groups` must divide C.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::size_t groups, T eps = T(1e-6));

// Grid lookups with cell-centred nodes: node i sits at (i + 0.5) / R and
// coordinates are clamped to the outermost nodes. Coordinates are not
// differentiated.
//
// grid[C,R], coords[P] in [0,1] -> [P,C]
template <typename T>
Tensor<T> linear_interp_1d(const Tensor<T>& grid, std::span<const T> coords);
// grid[C,R0,R1], coords[P*2] as (u along R0, v along R1) pairs -> [P,C]
template <typename T>
Tensor<T> bilinear_interp_2d(const Tensor<T>& grid, std::span<const T> coords);

}  // namespace zerorf::ops
