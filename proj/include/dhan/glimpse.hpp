#pragma once

// Hard-attention sensor: crops a g x g patch around a normalized location
// and accounts for every raw pixel value it reads.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "dhan/tensor.hpp"

namespace dhan {

// H x W x C, row-major, channel fastest.
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * channels + ch]; }
  float at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * channels + ch]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

// Normalized coordinates: (-1, -1) is the top-left pixel center, (1, 1) the
// bottom-right one.
struct Location {
  double row = 0.0, col = 0.0;

  Location clamped() const {
    auto c = [](double v) { return std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0); };
    return {c(row), c(col)};
  }
  bool operator==(const Location&) const = default;
};

class PixelAccessCounter {
 public:
  explicit PixelAccessCounter(std::uint64_t raw_total = 0) : raw_total_(raw_total) {}

  void add(std::uint64_t values) { reads_.fetch_add(values, std::memory_order_relaxed); }
  std::uint64_t reads() const { return reads_.load(std::memory_order_relaxed); }
  std::uint64_t raw_total() const { return raw_total_; }

 private:
  std::atomic<std::uint64_t> reads_{0};
  std::uint64_t raw_total_;
};

// Unique raw pixels touched (any channel).
class CoverageMap {
 public:
  CoverageMap(std::size_t height, std::size_t width) : height_(height), width_(width), touched_(height * width, 0) {}

  void mark(std::size_t r, std::size_t c) {
    auto& t = touched_[r * width_ + c];
    if (!t) {
      t = 1;
      ++unique_;
    }
  }
  bool touched(std::size_t r, std::size_t c) const { return touched_[r * width_ + c] != 0; }
  std::size_t unique() const { return unique_; }
  double fraction() const { return static_cast<double>(unique_) / static_cast<double>(height_ * width_); }

 private:
  std::size_t height_, width_;
  std::vector<std::uint8_t> touched_;
  std::size_t unique_ = 0;
};

// Read-only view that counts every value read and, optionally, which pixels.
class InstrumentedImage {
 public:
  InstrumentedImage(const Image& image, PixelAccessCounter* counter, CoverageMap* coverage)
      : image_(image), counter_(counter), coverage_(coverage) {}

  // Reads all channels of pixel (r, c) into out.
  void read_pixel(std::size_t r, std::size_t c, float* out) const {
    for (std::size_t ch = 0; ch < image_.channels; ++ch) out[ch] = image_.at(r, c, ch);
    if (counter_) counter_->add(image_.channels);
    if (coverage_) coverage_->mark(r, c);
  }

  std::size_t height() const { return image_.height; }
  std::size_t width() const { return image_.width; }
  std::size_t channels() const { return image_.channels; }

 private:
  const Image& image_;
  PixelAccessCounter* counter_;
  CoverageMap* coverage_;
};

struct Glimpse {
  Image patch;                  // g x g x C, zero outside the raw image
  Location location;            // clamped source location
  long center_row = 0, center_col = 0;
  std::size_t values_read = 0;  // in-bounds pixels x channels
};

// Pixel index of a normalized coordinate along an axis of `extent` pixels,
// rounding half away from zero.
inline long location_to_pixel(double normalized, std::size_t extent) {
  return static_cast<long>(std::round((normalized + 1.0) / 2.0 * static_cast<double>(extent - 1)));
}

// Inverse of location_to_pixel for pixel centers.
inline double pixel_to_location(long pixel, std::size_t extent) {
  if (extent == 1) return 0.0;
  return 2.0 * static_cast<double>(pixel) / static_cast<double>(extent - 1) - 1.0;
}

inline Glimpse extract_glimpse(const Image& image, Location where, std::size_t size,
                               PixelAccessCounter* counter = nullptr, CoverageMap* coverage = nullptr) {
  if (size == 0) throw std::invalid_argument("extract_glimpse: glimpse size must be positive");
  if (image.empty()) throw std::invalid_argument("extract_glimpse: empty image");
  Glimpse g;
  g.location = where.clamped();
  g.center_row = location_to_pixel(g.location.row, image.height);
  g.center_col = location_to_pixel(g.location.col, image.width);
  g.patch = Image(size, size, image.channels);
  const long half = static_cast<long>(size / 2);
  const long top = g.center_row - half, left = g.center_col - half;
  InstrumentedImage view(image, counter, coverage);
  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  const long r0 = std::max(top, 0L), r1 = std::min(top + static_cast<long>(size), h);
  const long c0 = std::max(left, 0L), c1 = std::min(left + static_cast<long>(size), w);
  for (long r = r0; r < r1; ++r) {
    for (long c = c0; c < c1; ++c) {
      view.read_pixel(static_cast<std::size_t>(r), static_cast<std::size_t>(c),
                      &g.patch.at(static_cast<std::size_t>(r - top), static_cast<std::size_t>(c - left), 0));
      g.values_read += image.channels;
    }
  }
  return g;
}

// Upper bound on the fraction of raw pixels an episode can touch.
inline double pixel_budget_fraction(std::size_t height, std::size_t width, std::size_t glimpse, std::size_t steps) {
  return static_cast<double>(steps) * static_cast<double>(glimpse) * static_cast<double>(glimpse) /
         (static_cast<double>(height) * static_cast<double>(width));
}

// Stacks patches into an (N, C, g, g) tensor.
template <class T>
Tensor<T> pack_patches(std::span<const Glimpse> glimpses) {
  if (glimpses.empty()) throw std::invalid_argument("pack_patches: no glimpses");
  const auto& first = glimpses.front().patch;
  const std::size_t c = first.channels, h = first.height, w = first.width;
  std::vector<T> data(glimpses.size() * c * h * w);
  for (std::size_t n = 0; n < glimpses.size(); ++n) {
    const auto& p = glimpses[n].patch;
    if (p.channels != c || p.height != h || p.width != w) throw ShapeError("pack_patches: patches differ in shape");
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) data[((n * c + ch) * h + r) * w + col] = static_cast<T>(p.at(r, col, ch));
  }
  return Tensor<T>({glimpses.size(), c, h, w}, std::move(data));
}

}  // namespace dhan
