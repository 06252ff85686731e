#include "zerorf/generator.hpp"

#include <cmath>
#include <stdexcept>

#include "zerorf/ops.hpp"

namespace zerorf {

std::string to_string(GeneratorArch arch) {
  return arch == GeneratorArch::kSDDecoder ? "sd-decoder" : "deep-decoder";
}

GeneratorArch parse_generator_arch(const std::string& name) {
  if (name == "sd-decoder") return GeneratorArch::kSDDecoder;
  if (name == "deep-decoder") return GeneratorArch::kDeepDecoder;
  throw std::invalid_argument("unknown generator architecture '" + name + "' (expected sd-decoder|deep-decoder)");
}

void GeneratorConfig::validate() const {
  if (noise_channels == 0 || out_channels == 0) throw std::invalid_argument("generator: channel counts must be > 0");
  if (noise_resolution == 0) throw std::invalid_argument("generator: noise_resolution must be > 0");
  if (stage_scales.empty() || stage_scales.size() != blocks_per_stage.size()) {
    throw std::invalid_argument("generator: stage_scales and blocks_per_stage must be non-empty and equal length");
  }
  if (stage_scales.front() != 1) throw std::invalid_argument("generator: first stage scale must be 1");
  for (std::size_t s = 1; s < stage_scales.size(); ++s) {
    const auto prev = stage_scales[s - 1], cur = stage_scales[s];
    if (cur != prev && cur != 2 * prev) {
      throw std::invalid_argument("generator: stage scales must stay equal or double");
    }
  }
  if (stage_scales.back() != 16) throw std::invalid_argument("generator: total upsampling must be 16");
  if (base_width == 0 || min_width == 0) throw std::invalid_argument("generator: widths must be > 0");
}

std::vector<std::size_t> GeneratorConfig::stage_widths() const {
  std::vector<std::size_t> widths;
  for (auto scale : stage_scales) widths.push_back(std::max(min_width, base_width / scale));
  return widths;
}

GeneratorConfig GeneratorConfig::paper_scale() {
  GeneratorConfig cfg;
  cfg.noise_resolution = 20;
  cfg.base_width = 304;
  cfg.min_width = 32;
  return cfg;
}

std::size_t norm_groups(std::size_t channels) {
  std::size_t g = std::min<std::size_t>(8, channels);
  while (channels % g != 0) --g;
  return g;
}

namespace {

Shape grid_shape(std::size_t channels, std::size_t resolution, GridDim dim) {
  return dim == GridDim::k1D ? Shape{channels, resolution} : Shape{channels, resolution, resolution};
}

}  // namespace

template <typename T>
NoiseBuffer<T> init_noise(std::uint64_t seed, std::size_t channels, std::size_t resolution, GridDim dim) {
  NoiseBuffer<T> buf;
  buf.seed = seed;
  buf.dim = dim;
  buf.values = Tensor<T>(grid_shape(channels, resolution, dim));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : buf.values.values()) v = static_cast<T>(normal(rng));
  return buf;
}

template <typename T>
NoiseBuffer<T> zero_noise(std::size_t channels, std::size_t resolution, GridDim dim) {
  NoiseBuffer<T> buf;
  buf.dim = dim;
  buf.values = Tensor<T>(grid_shape(channels, resolution, dim));
  return buf;
}

template <typename T>
Generator<T>::Generator(const GeneratorConfig& config, GridDim dim, GeneratorArch arch, std::uint64_t param_seed)
    : config_(config), dim_(dim), arch_(arch) {
  config_.validate();
  std::mt19937_64 rng(param_seed);
  const auto& scales = config_.stage_scales;
  const std::size_t n_stages = scales.size();

  if (arch_ == GeneratorArch::kSDDecoder) {
    const auto widths = config_.stage_widths();
    conv_in_ = make_conv(config_.noise_channels, widths[0], 3, true, rng);
    add_param("conv_in.weight", conv_in_->weight);
    add_param("conv_in.bias", conv_in_->bias);
    std::size_t in = widths[0];
    for (std::size_t s = 0; s < n_stages; ++s) {
      Stage stage;
      const std::size_t w = widths[s];
      const std::string sp = "stages." + std::to_string(s);
      for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
        const std::string bp = sp + ".blocks." + std::to_string(b);
        ResBlock blk;
        blk.norm1 = make_norm(in);
        blk.conv1 = make_conv(in, w, 3, true, rng);
        blk.norm2 = make_norm(w);
        blk.conv2 = make_conv(w, w, 3, true, rng);
        if (in != w) blk.skip = make_conv(in, w, 1, true, rng);
        add_param(bp + ".norm1.gamma", blk.norm1.gamma);
        add_param(bp + ".norm1.beta", blk.norm1.beta);
        add_param(bp + ".conv1.weight", blk.conv1.weight);
        add_param(bp + ".conv1.bias", blk.conv1.bias);
        add_param(bp + ".norm2.gamma", blk.norm2.gamma);
        add_param(bp + ".norm2.beta", blk.norm2.beta);
        add_param(bp + ".conv2.weight", blk.conv2.weight);
        add_param(bp + ".conv2.bias", blk.conv2.bias);
        if (blk.skip) {
          add_param(bp + ".skip.weight", blk.skip->weight);
          add_param(bp + ".skip.bias", blk.skip->bias);
        }
        stage.blocks.push_back(std::move(blk));
        in = w;
      }
      stage.doubles = s + 1 < n_stages && scales[s + 1] == 2 * scales[s];
      if (stage.doubles) {
        stage.upsample = make_conv(w, w, 3, true, rng);
        add_param(sp + ".upsample.weight", stage.upsample->weight);
        add_param(sp + ".upsample.bias", stage.upsample->bias);
      }
      stages_.push_back(std::move(stage));
    }
    norm_out_ = make_norm(in);
    add_param("norm_out.gamma", norm_out_->gamma);
    add_param("norm_out.beta", norm_out_->beta);
    conv_out_ = make_conv(in, config_.out_channels, 3, true, rng);
    add_param("conv_out.weight", conv_out_.weight);
    add_param("conv_out.bias", conv_out_.bias);
  } else {
    const std::size_t w = config_.base_width;
    std::size_t in = config_.noise_channels;
    for (std::size_t s = 0; s < n_stages; ++s) {
      Stage stage;
      const std::string sp = "stages." + std::to_string(s);
      stage.pointwise = make_conv(in, w, 1, false, rng);
      add_param(sp + ".pointwise.weight", stage.pointwise->weight);
      stage.doubles = s + 1 < n_stages && scales[s + 1] == 2 * scales[s];
      if (config_.deep_decoder_norm) {
        stage.norm = make_norm(w);
        add_param(sp + ".norm.gamma", stage.norm->gamma);
        add_param(sp + ".norm.beta", stage.norm->beta);
      }
      stages_.push_back(std::move(stage));
      in = w;
    }
    conv_out_ = make_conv(in, config_.out_channels, 1, false, rng);
    add_param("conv_out.weight", conv_out_.weight);
  }
}

template <typename T>
void Generator<T>::add_param(const std::string& name, const Tensor<T>& t) {
  params_.push_back({name, t});
}

template <typename T>
typename Generator<T>::Conv Generator<T>::make_conv(std::size_t in, std::size_t out, std::size_t kernel, bool bias,
                                                    std::mt19937_64& rng) {
  const std::size_t taps = dim_ == GridDim::k1D ? kernel : kernel * kernel;
  const std::size_t fan_in = in * taps;
  Shape shape = dim_ == GridDim::k1D ? Shape{out, in, kernel} : Shape{out, in, kernel, kernel};
  Conv c;
  c.weight = Tensor<T>(shape, true);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> wdist(-bound, bound);
  for (auto& v : c.weight.values()) v = static_cast<T>(wdist(rng));
  if (bias) {
    c.bias = Tensor<T>(Shape{out}, true);
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> bdist(-bb, bb);
    for (auto& v : c.bias.values()) v = static_cast<T>(bdist(rng));
  }
  return c;
}

template <typename T>
typename Generator<T>::Norm Generator<T>::make_norm(std::size_t channels) {
  Norm n{Tensor<T>::filled({channels}, T(1)), Tensor<T>::filled({channels}, T(0))};
  n.gamma.set_requires_grad(true);
  n.beta.set_requires_grad(true);
  return n;
}

template <typename T>
Tensor<T> Generator<T>::conv(const Conv& c, const Tensor<T>& x) const {
  const std::size_t k = c.weight.size(2);
  ops::ConvOptions opt;
  opt.padding = k / 2;
  opt.pad_mode = ops::PadMode::kReplicate;
  return dim_ == GridDim::k1D ? ops::conv1d(x, c.weight, c.bias, opt) : ops::conv2d(x, c.weight, c.bias, opt);
}

template <typename T>
Tensor<T> Generator<T>::norm(const Norm& n, const Tensor<T>& x) const {
  return ops::group_norm(x, n.gamma, n.beta, norm_groups(x.size(0)));
}

template <typename T>
Tensor<T> Generator<T>::forward_sd(const Tensor<T>& x) const {
  Tensor<T> h = conv(*conv_in_, x);
  for (const auto& stage : stages_) {
    for (const auto& blk : stage.blocks) {
      Tensor<T> r = conv(blk.conv1, ops::silu(norm(blk.norm1, h)));
      r = conv(blk.conv2, ops::silu(norm(blk.norm2, r)));
      h = ops::add(blk.skip ? conv(*blk.skip, h) : h, r);
    }
    if (stage.doubles) h = conv(*stage.upsample, ops::upsample_nearest2x(h));
  }
  return conv(conv_out_, ops::silu(norm(*norm_out_, h)));
}

template <typename T>
Tensor<T> Generator<T>::forward_dd(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (const auto& stage : stages_) {
    h = conv(*stage.pointwise, h);
    if (stage.doubles) h = ops::upsample_linear2x(h);
    h = ops::relu(h);
    if (stage.norm) h = norm(*stage.norm, h);
  }
  return conv(conv_out_, h);
}

template <typename T>
Tensor<T> Generator<T>::generate(const NoiseBuffer<T>& noise) const {
  if (noise.dim != dim_) throw std::invalid_argument("generator: noise dimensionality mismatch");
  return generate(noise.values);
}

template <typename T>
Tensor<T> Generator<T>::generate(const Tensor<T>& noise) const {
  const Shape expected = grid_shape(config_.noise_channels, config_.noise_resolution, dim_);
  if (noise.shape() != expected) {
    throw std::invalid_argument("generator: noise shape " + shape_str(noise.shape()) + ", expected " +
                                shape_str(expected));
  }
  return arch_ == GeneratorArch::kSDDecoder ? forward_sd(noise) : forward_dd(noise);
}

template <typename T>
std::vector<NamedParam<T>> Generator<T>::parameters(const std::string& prefix) const {
  std::vector<NamedParam<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back({prefix + p.name, p.tensor});
  return out;
}

template <typename T>
std::size_t Generator<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template struct NoiseBuffer<float>;
template struct NoiseBuffer<double>;
template NoiseBuffer<float> init_noise<float>(std::uint64_t, std::size_t, std::size_t, GridDim);
template NoiseBuffer<double> init_noise<double>(std::uint64_t, std::size_t, std::size_t, GridDim);
template NoiseBuffer<float> zero_noise<float>(std::size_t, std::size_t, GridDim);
template NoiseBuffer<double> zero_noise<double>(std::size_t, std::size_t, GridDim);
template class Generator<float>;
template class Generator<double>;

}  // namespace zerorf
