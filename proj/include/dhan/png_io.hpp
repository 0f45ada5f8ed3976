#pragma once

// 8-bit PNG read/write through libpng. Pixels map to [0, 1] floats as byte/255.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhan/glimpse.hpp"

namespace dhan {

class ImageIOError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIOError(path + ": cannot open");
  return f;
}

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

// Any PNG colour type is expanded to 8-bit RGB; alpha is dropped.
inline Image read_png(const std::string& path) {
  auto file = detail::open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw ImageIOError(path + ": not a PNG file");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_error_handler, detail::png_warning_handler);
  if (!png) throw ImageIOError(path + ": libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  Image img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIOError(path + ": " + (message.empty() ? "corrupt PNG" : message));
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(h * stride);
  rows.resize(h);
  for (std::size_t r = 0; r < h; ++r) rows[r] = buffer.data() + r * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (stride != w * 3) throw ImageIOError(path + ": unexpected row layout");
  img = Image(h, w, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  return img;
}

inline std::uint8_t to_byte(float v) {
  const float c = std::isnan(v) ? 0.0f : std::min(std::max(v, 0.0f), 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Writes 1-channel images as grayscale and 3-channel images as RGB.
inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageIOError(path + ": only 1 or 3 channel images can be written");
  auto file = detail::open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_error_handler, detail::png_warning_handler);
  if (!png) throw ImageIOError(path + ": libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> buffer(img.pixels.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = to_byte(img.pixels[i]);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = buffer.data() + r * img.width * img.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIOError(path + ": " + (message.empty() ? "write failed" : message));
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace dhan
