#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zerorf/optim.hpp"
#include "zerorf/tensor.hpp"

namespace zerorf {

// Real spherical harmonics of bands 0..degree-1 (degree^2 values, ordered
// band by band with m = -l..l). Supports degree 1..4. Non-unit directions
// are normalized.
template <typename T>
void sh_encode(std::array<T, 3> direction, std::size_t degree, T* out);

template <typename T>
std::vector<T> sh_encode(std::array<T, 3> direction, std::size_t degree);

inline constexpr std::size_t kMaxShDegree = 4;

// Per-point density and view-dependent color from field features:
//
//   h     = base(F)                     shared between both heads
//   sigma = exp(sigma_head(silu(h)))
//   rgb   = sigmoid(color_head(silu(h + dir_proj(SH(d)))))
//
// Position never enters the decoder.
template <typename T>
struct DecoderParams {
  Tensor<T> base_w;   // [C, H]
  Tensor<T> base_b;   // [H]
  Tensor<T> sigma_w;  // [H, 1]
  Tensor<T> sigma_b;  // [1]
  Tensor<T> dir_w;    // [S, H], no bias
  Tensor<T> color_w;  // [H, 3]
  Tensor<T> color_b;  // [3]
  std::size_t sh_degree = 4;

  std::size_t feature_channels() const { return base_w.size(0); }
  std::size_t hidden() const { return base_w.size(1); }
  std::size_t sh_size() const { return sh_degree * sh_degree; }

  std::vector<NamedParam<T>> parameters(const std::string& prefix = "") const;
};

struct DecoderConfig {
  std::size_t hidden = 64;
  std::size_t sh_degree = 4;
  double density_bias = -1.0;
};

// Uniform fan-in initialization; zero biases except the density bias.
template <typename T>
DecoderParams<T> init_decoder(std::size_t feature_channels, const DecoderConfig& config, std::uint64_t seed);

template <typename T>
struct DecodedSamples {
  Tensor<T> sigma;  // [P, 1]
  Tensor<T> rgb;    // [P, 3]
};

// Batched decode. `features` is [P, C]; `ray_sh` holds one SH encoding per
// ray, [R, S]; `ray_of_sample[p]` names the ray of sample p.
template <typename T>
DecodedSamples<T> decode(const DecoderParams<T>& params, const Tensor<T>& features, const Tensor<T>& ray_sh,
                         std::span<const std::size_t> ray_of_sample);

// Single-point forms.
template <typename T>
Tensor<T> decode_density(const DecoderParams<T>& params, const Tensor<T>& feature);

template <typename T>
Tensor<T> decode_color(const DecoderParams<T>& params, const Tensor<T>& feature, std::array<T, 3> direction);

}  // namespace zerorf
