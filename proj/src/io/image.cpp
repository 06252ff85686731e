#include "zerorf/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace zerorf {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

thread_local std::string png_error_message;

[[noreturn]] void png_fail(png_structp png, png_const_charp message) {
  png_error_message = message;
  png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw std::runtime_error("cannot open image " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  Image img;
  std::vector<unsigned char> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("failed to read " + path.string() + ": " + png_error_message);
  }
  {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_strip_16(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    buffer.resize(row_bytes * img.height);
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * row_bytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    img.data.resize(img.width * img.height * img.channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(buffer[i]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {

int png_color_type(std::size_t channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGBA;
    default: throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(channels));
  }
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  const int color = png_color_type(image.channels);
  if (image.data.size() != image.width * image.height * image.channels || image.width == 0 || image.height == 0) {
    throw std::invalid_argument("write_png: image buffer does not match its size");
  }
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw std::runtime_error("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  std::vector<unsigned char> buffer(image.data.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  std::vector<png_bytep> rows(image.height);
  const std::size_t stride = image.width * image.channels;
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * stride;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed to write " + path.string() + ": " + png_error_message);
  }
  {
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

Image to_rgb(const Image& image, const std::array<double, 3>& background) {
  Image out(image.width, image.height, 3);
  const bool grey = image.channels <= 2;
  const bool alpha = image.channels == 2 || image.channels == 4;
  for (std::size_t p = 0; p < image.pixels(); ++p) {
    const float* src = image.data.data() + p * image.channels;
    const float a = alpha ? src[image.channels - 1] : 1.0f;
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = grey ? src[0] : src[c];
      out.data[3 * p + c] = a * v + (1.0f - a) * static_cast<float>(background[c]);
    }
  }
  return out;
}

}  // namespace zerorf
