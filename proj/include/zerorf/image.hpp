#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace zerorf {

// Interleaved float image, row-major, values in [0,1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * channels + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return data[(y * width + x) * channels + c]; }
  std::size_t pixels() const { return width * height; }
};

// 8-bit or 16-bit PNG of any colour type; palettes are expanded and
// transparency becomes an alpha channel. Result has 1, 2, 3 or 4 channels.
Image read_png(const std::filesystem::path& path);

// 8-bit PNG with 1 (grey), 3 (rgb) or 4 (rgba) channels; values are clamped
// and rounded.
void write_png(const std::filesystem::path& path, const Image& image);

// RGB image from grey/rgb(+alpha) input, alpha blended over `background`.
Image to_rgb(const Image& image, const std::array<double, 3>& background);

}  // namespace zerorf
