#include "zerorf/metrics.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace zerorf {

double psnr_from_mse(double mse) { return mse < 1e-10 ? kPsnrCap : -10.0 * std::log10(mse); }

double psnr(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: images differ in size or are empty");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return psnr_from_mse(sum / static_cast<double>(a.size()));
}

namespace {

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    g[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable valid-mode filtering of a single-channel plane.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t w, std::size_t h,
                                 const std::array<double, kWindow>& g) {
  const std::size_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> tmp(ow * h), out(ow * oh);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * src[y * w + x + k];
      tmp[y * ow + x] = s;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * tmp[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw std::invalid_argument("ssim: images differ in shape");
  }
  if (a.width < kWindow || a.height < kWindow) throw std::invalid_argument("ssim: images smaller than the window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_window();
  const std::size_t n = a.pixels();
  double total = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.data[i * a.channels + c];
      y[i] = b.data[i * b.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    auto mx = filter_valid(x, a.width, a.height, g), my = filter_valid(y, a.width, a.height, g);
    auto sxx = filter_valid(xx, a.width, a.height, g), syy = filter_valid(yy, a.width, a.height, g);
    auto sxy = filter_valid(xy, a.width, a.height, g);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(a.channels);
}

std::optional<double> MetricReport::mean_psnr() const {
  if (views.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& v : views) s += v.psnr;
  return s / static_cast<double>(views.size());
}

std::optional<double> MetricReport::mean_ssim() const {
  if (views.empty()) return std::nullopt;
  double s = 0.0;
  for (const auto& v : views) s += v.ssim;
  return s / static_cast<double>(views.size());
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os << std::setprecision(10);
  for (const auto& v : views) os << "view=" << v.name << " psnr=" << v.psnr << " ssim=" << v.ssim << "\n";
  os << "views=" << views.size() << "\n";
  if (auto p = mean_psnr()) os << "mean_psnr=" << *p << "\n";
  if (auto s = mean_ssim()) os << "mean_ssim=" << *s << "\n";
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["views"] = nlohmann::json::array();
  for (const auto& v : views) j["views"].push_back({{"name", v.name}, {"psnr", v.psnr}, {"ssim", v.ssim}});
  j["mean_psnr"] = mean_psnr() ? nlohmann::json(*mean_psnr()) : nlohmann::json(nullptr);
  j["mean_ssim"] = mean_ssim() ? nlohmann::json(*mean_ssim()) : nlohmann::json(nullptr);
  return j.dump(2);
}

void MetricReport::write(const std::filesystem::path& stem) const {
  auto write_file = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
  };
  write_file(std::filesystem::path(stem.string() + ".txt"), to_text());
  write_file(std::filesystem::path(stem.string() + ".json"), to_json() + "\n");
}

}  // namespace zerorf
