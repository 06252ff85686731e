#pragma once

#include <memory>
#include <string>
#include <vector>

#include "zerorf/checkpoint.hpp"
#include "zerorf/config.hpp"
#include "zerorf/decoder.hpp"
#include "zerorf/field.hpp"
#include "zerorf/generator.hpp"
#include "zerorf/renderer.hpp"

namespace zerorf {

// Feature volume plus decoder for one mode.
//
// Generator modes own one 2D generator per plane and, in vm mode, one 1D
// generator per line, each fed its own frozen noise buffer. Direct modes own
// the factor tensors. Trainable tensors are reported by parameters(); noise
// never is.
template <typename T>
class RadianceModel {
 public:
  explicit RadianceModel(const TrainConfig& config);

  const TrainConfig& config() const { return config_; }

  // Factor grids for the current parameters. Generator outputs are recorded
  // on the active tape, so call this inside the training step.
  FactorizedField<T> field() const;

  std::vector<NamedParam<T>> parameters() const;
  std::size_t parameter_count() const;

  // Frozen generator inputs, named "planes.<a>" and "lines.<a>".
  std::vector<std::pair<std::string, const NoiseBuffer<T>*>> noise() const;

  DecoderParams<T>& decoder() { return decoder_; }
  const DecoderParams<T>& decoder() const { return decoder_; }

  SampleFn<T> sample_fn(const FactorizedField<T>& field) const;
  DensityFn<T> density_fn(const FactorizedField<T>& field) const;

  // Parameters and noise under "param/<name>" and "noise/<name>".
  void save(Checkpoint& checkpoint) const;
  void load(const Checkpoint& checkpoint);

 private:
  TrainConfig config_;
  std::vector<Generator<T>> plane_generators_;
  std::vector<Generator<T>> line_generators_;
  std::vector<NoiseBuffer<T>> plane_noise_;
  std::vector<NoiseBuffer<T>> line_noise_;
  std::array<Tensor<T>, 3> matrices_;
  std::array<Tensor<T>, 3> vectors_;
  DecoderParams<T> decoder_;
};

// Stream of distinct seeds derived from one base value.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace zerorf
