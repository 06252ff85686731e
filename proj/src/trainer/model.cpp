#include "zerorf/model.hpp"

#include <random>
#include <stdexcept>

namespace zerorf {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

template <typename T>
Tensor<T> gaussian_tensor(std::mt19937_64& rng, Shape shape, double stddev) {
  Tensor<T> t(std::move(shape), true);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace

template <typename T>
RadianceModel<T>::RadianceModel(const TrainConfig& config) : config_(config) {
  config_.validate();
  const std::size_t ch = config_.feature_channels, res = config_.grid_resolution;
  const bool vm = factor_mode(config_.mode) == FactorMode::kVM;
  if (uses_generators(config_.mode)) {
    const GeneratorConfig g = config_.resolved_generator();
    auto make_noise = [&](std::uint64_t index, GridDim dim) {
      return config_.zero_noise ? zero_noise<T>(g.noise_channels, g.noise_resolution, dim)
                                : init_noise<T>(derive_seed(config_.noise_seed, index), g.noise_channels,
                                                g.noise_resolution, dim);
    };
    for (std::uint64_t a = 0; a < 3; ++a) {
      plane_generators_.emplace_back(g, GridDim::k2D, config_.generator_arch, derive_seed(config_.param_seed, a));
      plane_noise_.push_back(make_noise(a, GridDim::k2D));
      if (vm) {
        line_generators_.emplace_back(g, GridDim::k1D, config_.generator_arch,
                                      derive_seed(config_.param_seed, 3 + a));
        line_noise_.push_back(make_noise(3 + a, GridDim::k1D));
      }
    }
  } else {
    std::mt19937_64 rng(derive_seed(config_.param_seed, 6));
    for (std::size_t a = 0; a < 3; ++a) {
      matrices_[a] = gaussian_tensor<T>(rng, {ch, res, res}, config_.direct_init_std);
      if (vm) vectors_[a] = gaussian_tensor<T>(rng, {ch, res}, config_.direct_init_std);
    }
  }
  decoder_ = init_decoder<T>(ch, config_.decoder, derive_seed(config_.param_seed, 7));
}

template <typename T>
FactorizedField<T> RadianceModel<T>::field() const {
  FactorizedField<T> f;
  f.mode = factor_mode(config_.mode);
  f.half_extent = config_.half_extent;
  const std::size_t ch = config_.feature_channels, res = config_.grid_resolution;
  if (uses_generators(config_.mode)) {
    for (std::size_t a = 0; a < 3; ++a) {
      f.matrices[a] = plane_generators_[a].generate(plane_noise_[a]);
      if (!line_generators_.empty()) f.vectors[a] = line_generators_[a].generate(line_noise_[a]);
    }
  } else {
    f.matrices = matrices_;
    f.vectors = vectors_;
  }
  if (f.mode == FactorMode::kTriplane) f.vectors = unit_vectors<T>(ch, res);
  return f;
}

template <typename T>
std::vector<NamedParam<T>> RadianceModel<T>::parameters() const {
  std::vector<NamedParam<T>> out;
  auto append = [&out](std::vector<NamedParam<T>> more) {
    for (auto& p : more) out.push_back(std::move(p));
  };
  for (std::size_t a = 0; a < plane_generators_.size(); ++a) {
    append(plane_generators_[a].parameters("planes." + std::to_string(a) + "."));
  }
  for (std::size_t a = 0; a < line_generators_.size(); ++a) {
    append(line_generators_[a].parameters("lines." + std::to_string(a) + "."));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (matrices_[a].defined()) out.push_back({"grid.matrix." + std::to_string(a), matrices_[a]});
    if (vectors_[a].defined()) out.push_back({"grid.vector." + std::to_string(a), vectors_[a]});
  }
  append(decoder_.parameters("decoder."));
  return out;
}

template <typename T>
std::size_t RadianceModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
std::vector<std::pair<std::string, const NoiseBuffer<T>*>> RadianceModel<T>::noise() const {
  std::vector<std::pair<std::string, const NoiseBuffer<T>*>> out;
  for (std::size_t a = 0; a < plane_noise_.size(); ++a) out.emplace_back("planes." + std::to_string(a), &plane_noise_[a]);
  for (std::size_t a = 0; a < line_noise_.size(); ++a) out.emplace_back("lines." + std::to_string(a), &line_noise_[a]);
  return out;
}

namespace {

template <typename T>
Tensor<T> ray_encodings(std::span<const Vec3> dirs, std::size_t degree) {
  const std::size_t s = degree * degree;
  Tensor<T> sh(Shape{dirs.size(), s});
  for (std::size_t r = 0; r < dirs.size(); ++r) {
    sh_encode<T>({static_cast<T>(dirs[r][0]), static_cast<T>(dirs[r][1]), static_cast<T>(dirs[r][2])}, degree,
                 sh.values().data() + r * s);
  }
  return sh;
}

}  // namespace

template <typename T>
SampleFn<T> RadianceModel<T>::sample_fn(const FactorizedField<T>& field) const {
  return [field, decoder = decoder_](std::span<const T> positions, std::span<const std::size_t> ray_of_sample,
                                     std::span<const Vec3> dirs) {
    return decode(decoder, sample_field(field, positions), ray_encodings<T>(dirs, decoder.sh_degree), ray_of_sample);
  };
}

template <typename T>
DensityFn<T> RadianceModel<T>::density_fn(const FactorizedField<T>& field) const {
  return [field, decoder = decoder_](std::span<const T> points) {
    NoGradScope<T> no_grad;
    const std::size_t n = points.size() / 3;
    Tensor<T> sh(Shape{1, decoder.sh_size()});
    std::vector<std::size_t> rays(n, 0);
    auto decoded = decode(decoder, sample_field(field, points), sh, rays);
    auto v = decoded.sigma.values();
    return std::vector<T>(v.begin(), v.end());
  };
}

template <typename T>
void RadianceModel<T>::save(Checkpoint& checkpoint) const {
  for (const auto& p : parameters()) checkpoint.put_tensor<T>("param/" + p.name, p.tensor);
  for (const auto& [name, buffer] : noise()) checkpoint.put_tensor<T>("noise/" + name, buffer->values);
}

template <typename T>
void RadianceModel<T>::load(const Checkpoint& checkpoint) {
  for (auto& p : parameters()) checkpoint.load_into<T>("param/" + p.name, p.tensor);
  for (std::size_t a = 0; a < plane_noise_.size(); ++a) {
    checkpoint.load_into<T>("noise/planes." + std::to_string(a), plane_noise_[a].values);
  }
  for (std::size_t a = 0; a < line_noise_.size(); ++a) {
    checkpoint.load_into<T>("noise/lines." + std::to_string(a), line_noise_[a].values);
  }
}

template class RadianceModel<float>;
template class RadianceModel<double>;

}  // namespace zerorf
