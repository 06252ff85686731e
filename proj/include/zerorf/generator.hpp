#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "zerorf/optim.hpp"
#include "zerorf/tensor.hpp"

namespace zerorf {

enum class GridDim { k1D = 1, k2D = 2 };
enum class GeneratorArch { kSDDecoder, kDeepDecoder };

std::string to_string(GeneratorArch arch);
GeneratorArch parse_generator_arch(const std::string& name);

struct GeneratorConfig {
  std::size_t noise_channels = 8;
  std::size_t out_channels = 16;
  // Cumulative upsampling factor of each stage relative to the noise grid.
  std::vector<std::size_t> stage_scales{1, 2, 4, 8, 16, 16};
  std::vector<std::size_t> blocks_per_stage{2, 4, 4, 4, 4, 4};
  // Width of the first stage; halves every time the resolution doubles and
  // never drops below min_width.
  std::size_t base_width = 32;
  std::size_t min_width = 8;
  std::size_t noise_resolution = 4;
  // Deep Decoder only: channel normalization after each ReLU.
  bool deep_decoder_norm = true;

  void validate() const;
  std::size_t output_resolution() const { return noise_resolution * stage_scales.back(); }
  std::vector<std::size_t> stage_widths() const;

  // 320^2 planes from 20^2 noise with widths sized to a ~7M
  // parameter budget.
  static GeneratorConfig paper_scale();
};

// Group count used by every normalization layer: min(8, C), lowered until
// it divides C.
std::size_t norm_groups(std::size_t channels);

// Fixed standard-normal generator input. Never part of the optimizer's
// parameter set.
template <typename T>
struct NoiseBuffer {
  std::uint64_t seed = 0;
  GridDim dim = GridDim::k2D;
  Tensor<T> values;  // [channels, n] or [channels, n, n]
};

template <typename T>
NoiseBuffer<T> init_noise(std::uint64_t seed, std::size_t channels, std::size_t resolution, GridDim dim);

// All-zero input of the same shape, for the no-noise ablation.
template <typename T>
NoiseBuffer<T> zero_noise(std::size_t channels, std::size_t resolution, GridDim dim);

// Untrained convolutional network mapping a noise grid to a feature grid of
// out_channels x (noise_resolution * 16)^dim.
//
// kSDDecoder: conv_in, then per stage a run of ResNet basic blocks
// (norm, silu, conv3, norm, silu, conv3, plus skip) followed by nearest x2
// upsampling and conv3 whenever the next stage doubles the resolution, then
// norm, silu, conv_out. Convolutions pad by edge replication.
//
// kDeepDecoder: per stage a bias-free 1x1 convolution, linear x2 upsampling
// where the resolution doubles, ReLU and optional channel normalization;
// a final bias-free 1x1 convolution.
template <typename T>
class Generator {
 public:
  Generator(const GeneratorConfig& config, GridDim dim, GeneratorArch arch, std::uint64_t param_seed);

  Tensor<T> generate(const NoiseBuffer<T>& noise) const;
  Tensor<T> generate(const Tensor<T>& noise) const;

  const GeneratorConfig& config() const { return config_; }
  GridDim dim() const { return dim_; }
  GeneratorArch arch() const { return arch_; }

  // Named in a stable order so checkpoints can address them.
  std::vector<NamedParam<T>> parameters(const std::string& prefix = "") const;
  std::size_t parameter_count() const;

 private:
  struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;  // may be undefined
  };
  struct Norm {
    Tensor<T> gamma;
    Tensor<T> beta;
  };
  struct ResBlock {
    Norm norm1;
    Conv conv1;
    Norm norm2;
    Conv conv2;
    std::optional<Conv> skip;
  };
  struct Stage {
    std::vector<ResBlock> blocks;
    std::optional<Conv> upsample;
    // Deep Decoder stage
    std::optional<Conv> pointwise;
    std::optional<Norm> norm;
    bool doubles = false;
  };

  Conv make_conv(std::size_t in, std::size_t out, std::size_t kernel, bool bias, std::mt19937_64& rng);
  Norm make_norm(std::size_t channels);
  Tensor<T> conv(const Conv& c, const Tensor<T>& x) const;
  Tensor<T> norm(const Norm& n, const Tensor<T>& x) const;
  Tensor<T> forward_sd(const Tensor<T>& x) const;
  Tensor<T> forward_dd(const Tensor<T>& x) const;
  void add_param(const std::string& name, const Tensor<T>& t);

  GeneratorConfig config_;
  GridDim dim_;
  GeneratorArch arch_;
  std::optional<Conv> conv_in_;
  std::vector<Stage> stages_;
  std::optional<Norm> norm_out_;
  Conv conv_out_;
  std::vector<NamedParam<T>> params_;
};

}  // namespace zerorf
