#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string>

#include "zerorf/decoder.hpp"
#include "zerorf/field.hpp"
#include "zerorf/generator.hpp"
#include "zerorf/optim.hpp"

namespace zerorf {

// zerorf-*: factor grids are generator outputs. direct-*: factor grids are
// the trainable tensors themselves.
enum class ModelMode { kZeroRFVM, kZeroRFTriplane, kDirectVM, kDirectTriplane };

std::string to_string(ModelMode mode);
ModelMode parse_model_mode(const std::string& name);
bool uses_generators(ModelMode mode);
FactorMode factor_mode(ModelMode mode);
// Same factorization with the other parametrization.
ModelMode counterpart(ModelMode mode);

// Serialized as JSON with one object per section:
//   train, model, generator, render, optim, seeds
struct TrainConfig {
  // train
  std::uint64_t iterations = 2000;
  std::size_t rays_per_batch = 4096;
  std::size_t log_every = 100;
  bool occupancy = true;
  std::size_t occupancy_every = 500;
  // Extra refresh before the first periodic one; 0 disables it.
  std::size_t occupancy_warmup = 100;
  std::size_t occupancy_resolution = 32;
  std::uint64_t checkpoint_every = 0;  // 0 writes only the final checkpoint

  // model
  ModelMode mode = ModelMode::kZeroRFVM;
  std::size_t grid_resolution = 64;
  std::size_t feature_channels = 16;
  double half_extent = 1.5;
  bool zero_noise = false;
  DecoderConfig decoder;
  double direct_init_std = 0.1;

  // generator; out_channels and noise_resolution are derived from the model
  // section (noise grid = grid_resolution / 16)
  GeneratorArch generator_arch = GeneratorArch::kSDDecoder;
  GeneratorConfig generator;

  // render
  std::size_t samples_per_ray = 128;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  bool early_termination = false;

  // optim
  double lr_start = 0.002;
  double lr_end = 0.001;
  AdamWConfig adam;

  // seeds
  std::uint64_t noise_seed = 0;
  std::uint64_t param_seed = 1;
  std::uint64_t data_seed = 2;

  // Generator configuration with the derived fields filled in.
  GeneratorConfig resolved_generator() const;
  // Sets all three seeds from one base value.
  void set_seed(std::uint64_t base);
  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are errors.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::string& path);
  // "section.key=value"; the value is parsed as JSON and falls back to a
  // plain string.
  void apply_override(const std::string& assignment);

  // 10k iterations on 320^3 grids with the large generator.
  static TrainConfig paper_scale();
};

}  // namespace zerorf
