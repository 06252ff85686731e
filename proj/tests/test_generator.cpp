#include <doctest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "zerorf/generator.hpp"
#include "zerorf/ops.hpp"

using namespace zerorf;
using namespace zerorf::testing;

namespace {

GeneratorConfig desk_config() {
  GeneratorConfig cfg;
  cfg.noise_resolution = 4;
  return cfg;
}

// Parameter count of the stage plan computed from the layer list alone.
std::size_t expected_sd_params(const GeneratorConfig& cfg, std::size_t taps3) {
  auto conv = [&](std::size_t in, std::size_t out, std::size_t taps) { return out * in * taps + out; };
  auto widths = cfg.stage_widths();
  std::size_t n = conv(cfg.noise_channels, widths[0], taps3);
  std::size_t in = widths[0];
  for (std::size_t s = 0; s < widths.size(); ++s) {
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      n += 2 * in + conv(in, widths[s], taps3) + 2 * widths[s] + conv(widths[s], widths[s], taps3);
      if (in != widths[s]) n += conv(in, widths[s], 1);
      in = widths[s];
    }
    if (s + 1 < widths.size() && cfg.stage_scales[s + 1] == 2 * cfg.stage_scales[s]) n += conv(in, in, taps3);
  }
  return n + 2 * in + conv(in, cfg.out_channels, taps3);
}

double spatial_variance_max(const Tensor<double>& y) {
  const std::size_t c = y.size(0), n = y.numel() / c;
  double worst = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += y.values()[ch * n + i];
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) sq += std::pow(y.values()[ch * n + i] - mean, 2);
    worst = std::max(worst, sq / n);
  }
  return worst;
}

}  // namespace

TEST_CASE("noise buffers are deterministic standard normal") {
  auto a = init_noise<double>(11, 8, 20, GridDim::k2D);
  auto b = init_noise<double>(11, 8, 20, GridDim::k2D);
  auto c = init_noise<double>(12, 8, 20, GridDim::k2D);
  REQUIRE(a.values.shape() == Shape{8, 20, 20});
  CHECK(std::equal(a.values.values().begin(), a.values.values().end(), b.values.values().begin()));
  std::size_t differ = 0;
  double mean = 0.0, sq = 0.0;
  const auto n = a.values.numel();
  for (std::size_t i = 0; i < n; ++i) {
    differ += a.values.values()[i] != c.values.values()[i];
    mean += a.values.values()[i];
  }
  mean /= n;
  for (double v : a.values.values()) sq += (v - mean) * (v - mean);
  CHECK(differ > 0.99 * n);
  CHECK(std::abs(mean) < 0.1);
  CHECK(std::abs(std::sqrt(sq / n) - 1.0) < 0.1);
  CHECK_FALSE(a.values.requires_grad());
}

TEST_CASE("SD generator output shapes") {
  auto cfg = desk_config();
  Generator<float> g2(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 1);
  Generator<float> g1(cfg, GridDim::k1D, GeneratorArch::kSDDecoder, 1);
  CHECK(g2.generate(init_noise<float>(3, 8, 4, GridDim::k2D)).shape() == Shape{16, 64, 64});
  CHECK(g1.generate(init_noise<float>(3, 8, 4, GridDim::k1D)).shape() == Shape{16, 64});
  cfg.noise_resolution = 2;
  Generator<float> g3(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 1);
  CHECK(g3.generate(init_noise<float>(3, 8, 2, GridDim::k2D)).shape() == Shape{16, 32, 32});
}

TEST_CASE("generator rejects mismatched noise") {
  Generator<float> g(desk_config(), GridDim::k2D, GeneratorArch::kSDDecoder, 1);
  CHECK_THROWS_AS(g.generate(init_noise<float>(3, 8, 5, GridDim::k2D)), std::invalid_argument);
  CHECK_THROWS_AS(g.generate(init_noise<float>(3, 4, 4, GridDim::k2D)), std::invalid_argument);
  CHECK_THROWS_AS(g.generate(init_noise<float>(3, 8, 4, GridDim::k1D)), std::invalid_argument);
  GeneratorConfig bad = desk_config();
  bad.stage_scales = {1, 4, 16};
  bad.blocks_per_stage = {1, 1, 1};
  CHECK_THROWS_AS(Generator<float>(bad, GridDim::k2D, GeneratorArch::kSDDecoder, 1), std::invalid_argument);
}

TEST_CASE("stage widths and group counts") {
  CHECK(desk_config().stage_widths() == std::vector<std::size_t>{32, 16, 8, 8, 8, 8});
  CHECK(GeneratorConfig::paper_scale().stage_widths() == std::vector<std::size_t>{304, 152, 76, 38, 32, 32});
  CHECK(norm_groups(32) == 8);
  CHECK(norm_groups(6) == 6);
  CHECK(norm_groups(12) == 6);
  CHECK(norm_groups(3) == 3);
}

TEST_CASE("parameter count matches the layer plan") {
  auto cfg = desk_config();
  Generator<float> g2(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 1);
  Generator<float> g1(cfg, GridDim::k1D, GeneratorArch::kSDDecoder, 1);
  CHECK(g2.parameter_count() == expected_sd_params(cfg, 9));
  CHECK(g1.parameter_count() == expected_sd_params(cfg, 3));
}

TEST_CASE("paper-scale generator has about 7M parameters") {
  auto cfg = GeneratorConfig::paper_scale();
  Generator<float> g(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 1);
  const auto n = g.parameter_count();
  MESSAGE("paper-scale parameters: " << n);
  CHECK(n == expected_sd_params(cfg, 9));
  CHECK(n >= 5'950'000);
  CHECK(n <= 8'050'000);
  CHECK(cfg.output_resolution() == 320);
}

TEST_CASE("untrained generators are deterministic in the parameter seed") {
  auto noise = init_noise<double>(5, 8, 2, GridDim::k2D);
  auto cfg = desk_config();
  cfg.noise_resolution = 2;
  Generator<double> a(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 42);
  Generator<double> b(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 42);
  Generator<double> c(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 43);
  auto ya = a.generate(noise), yb = b.generate(noise), yc = c.generate(noise);
  CHECK(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
  CHECK_FALSE(std::equal(ya.values().begin(), ya.values().end(), yc.values().begin()));
}

TEST_CASE("zero noise gives spatially constant output") {
  auto cfg = desk_config();
  cfg.noise_resolution = 2;
  for (auto dim : {GridDim::k1D, GridDim::k2D}) {
    Generator<double> g(cfg, dim, GeneratorArch::kSDDecoder, 9);
    auto y = g.generate(zero_noise<double>(8, 2, dim));
    CHECK(spatial_variance_max(y) < 1e-10);
    auto z = g.generate(init_noise<double>(1, 8, 2, dim));
    CHECK(spatial_variance_max(z) > 1e-4);
  }
}

TEST_CASE("noise receives no gradient and parameters do") {
  auto cfg = desk_config();
  cfg.noise_resolution = 1;
  Generator<double> g(cfg, GridDim::k2D, GeneratorArch::kSDDecoder, 2);
  auto noise = init_noise<double>(1, 8, 1, GridDim::k2D);
  std::vector<double> before(noise.values.values().begin(), noise.values.values().end());
  TapeScope<double> scope;
  scope.backward(weighted_sum(g.generate(noise), 3));
  CHECK_FALSE(noise.values.has_grad());
  for (const auto& p : g.parameters()) {
    INFO(p.name);
    CHECK(p.tensor.has_grad());
  }
  CHECK(std::equal(before.begin(), before.end(), noise.values.values().begin()));
}

TEST_CASE("small SD generator gradients match finite differences") {
  GeneratorConfig cfg;
  cfg.noise_channels = 2;
  cfg.out_channels = 2;
  cfg.noise_resolution = 2;
  cfg.base_width = 4;
  cfg.min_width = 2;
  cfg.stage_scales = {1, 2, 4, 8, 16};
  cfg.blocks_per_stage = {1, 1, 1, 1, 1};
  for (auto dim : {GridDim::k1D, GridDim::k2D}) {
    Generator<double> g(cfg, dim, GeneratorArch::kSDDecoder, 4);
    auto noise = init_noise<double>(2, 2, 2, dim);
    std::vector<Tensor<double>> leaves;
    for (const auto& p : g.parameters()) leaves.push_back(p.tensor);
    GradCheckTolerance tol;
    tol.rel = 1e-4;
    auto result = gradcheck([&] { return weighted_sum(g.generate(noise), 5); }, leaves, tol);
    INFO(result.detail);
    CHECK(result.ok);
  }
}

TEST_CASE("deep decoder shape contract") {
  auto cfg = desk_config();
  Generator<float> g2(cfg, GridDim::k2D, GeneratorArch::kDeepDecoder, 1);
  Generator<float> g1(cfg, GridDim::k1D, GeneratorArch::kDeepDecoder, 1);
  CHECK(g2.generate(init_noise<float>(3, 8, 4, GridDim::k2D)).shape() == Shape{16, 64, 64});
  CHECK(g1.generate(init_noise<float>(3, 8, 4, GridDim::k1D)).shape() == Shape{16, 64});
}

TEST_CASE("norm-free deep decoder is positively homogeneous in its input") {
  auto cfg = desk_config();
  cfg.noise_resolution = 2;
  cfg.deep_decoder_norm = false;
  Generator<double> g(cfg, GridDim::k2D, GeneratorArch::kDeepDecoder, 6);
  auto noise = init_noise<double>(7, 8, 2, GridDim::k2D);
  auto y = g.generate(noise);
  auto y3 = g.generate(ops::scale(noise.values, 3.0));
  double scale = 0.0;
  for (double v : y.values()) scale = std::max(scale, std::abs(v));
  REQUIRE(scale > 0.0);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    CHECK(y3.values()[i] == doctest::Approx(3.0 * y.values()[i]).epsilon(1e-12).scale(scale));
  }
}

TEST_CASE("deep decoder fits a smooth 32x32 image") {
  GeneratorConfig cfg;
  cfg.noise_resolution = 2;
  cfg.out_channels = 1;
  cfg.base_width = 32;
  Generator<float> g(cfg, GridDim::k2D, GeneratorArch::kDeepDecoder, 3);
  auto noise = init_noise<float>(4, 8, 2, GridDim::k2D);
  Tensor<float> target(Shape{1, 32, 32});
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      const double x = (i + 0.5) / 32.0, y = (j + 0.5) / 32.0;
      target.values()[i * 32 + j] = static_cast<float>(0.5 + 0.3 * std::sin(2.0 * x + 1.0) * std::cos(3.0 * y));
    }
  }
  AdamWConfig ocfg;
  ocfg.weight_decay = 0.0;
  AdamW<float> opt(g.parameters(), ocfg);
  double mse = 1.0;
  for (int step = 0; step < 1000; ++step) {
    TapeScope<float> scope;
    auto diff = ops::sub(g.generate(noise), target);
    auto loss = ops::mean(ops::mul(diff, diff));
    mse = loss.item();
    scope.backward(loss);
    opt.step(cosine_lr(step, 1000, 0.01, 0.001));
    opt.zero_grad();
  }
  MESSAGE("deep decoder final mse " << mse);
  CHECK(mse < 1e-3);
}
