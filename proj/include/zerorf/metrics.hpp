#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zerorf/image.hpp"

namespace zerorf {

inline constexpr double kPsnrCap = 99.0;

// -10 log10(MSE); kPsnrCap when MSE < 1e-10.
double psnr(std::span<const float> a, std::span<const float> b);
double psnr_from_mse(double mse);

// Mean SSIM over the valid 11x11 Gaussian windows (sigma 1.5, k1 0.01,
// k2 0.03, range 1), averaged over channels.
double ssim(const Image& a, const Image& b);

struct ViewMetric {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ViewMetric> views;

  std::optional<double> mean_psnr() const;
  std::optional<double> mean_ssim() const;
  // key=value lines: one "view=<name> psnr=<v> ssim=<v>" per view, then means.
  std::string to_text() const;
  std::string to_json() const;
  // Writes <stem>.txt and <stem>.json.
  void write(const std::filesystem::path& stem) const;
};

}  // namespace zerorf
