#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "f2p/error.hpp"

namespace f2p {

// Grayscale raster, row-major, intensities nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

// Binary raster, 1 = inside.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator==(const Mask&) const = default;
};

// Half-open pixel rectangle [x, x + width) x [y, y + height).
struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  int right() const { return x + width; }
  int bottom() const { return y + height; }
  bool empty() const { return width <= 0 || height <= 0; }
  bool contains(const Rect& o) const {
    return o.x >= x && o.y >= y && o.right() <= right() && o.bottom() <= bottom();
  }
  bool operator==(const Rect&) const = default;
};

inline Rect bounding_box(const Mask& m) {
  int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

// Bilinear resample of `box` (which may extend past the image; samples are
// edge-clamped) to out_w x out_h. Pixel centres are aligned so that a box of
// exactly out_w x out_h is copied unchanged.
inline Image resample_bilinear(const Image& src, const Rect& box, int out_w, int out_h) {
  Image out(out_w, out_h);
  const double sx = static_cast<double>(box.width) / out_w;
  const double sy = static_cast<double>(box.height) / out_h;
  for (int j = 0; j < out_h; ++j) {
    const double fy = box.y + (j + 0.5) * sy - 0.5;
    const double y0f = std::floor(fy);
    const double ty = fy - y0f;
    const int y0 = std::clamp(static_cast<int>(y0f), 0, src.height - 1);
    const int y1 = std::clamp(static_cast<int>(y0f) + 1, 0, src.height - 1);
    for (int i = 0; i < out_w; ++i) {
      const double fx = box.x + (i + 0.5) * sx - 0.5;
      const double x0f = std::floor(fx);
      const double tx = fx - x0f;
      const int x0 = std::clamp(static_cast<int>(x0f), 0, src.width - 1);
      const int x1 = std::clamp(static_cast<int>(x0f) + 1, 0, src.width - 1);
      const double top = src.at(x0, y0) * (1.0 - tx) + src.at(x1, y0) * tx;
      const double bot = src.at(x0, y1) * (1.0 - tx) + src.at(x1, y1) * tx;
      out.at(i, j) = static_cast<float>(top * (1.0 - ty) + bot * ty);
    }
  }
  return out;
}

inline double mean_intensity(const Image& img) {
  double s = 0.0;
  for (float p : img.pixels) s += p;
  return img.pixels.empty() ? 0.0 : s / static_cast<double>(img.pixels.size());
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Quantize through 8 bits, the same transform a PNG round trip applies.
inline Image quantize8(const Image& img) {
  Image out = img;
  for (auto& p : out.pixels) p = to_byte(p) / 255.0f;
  return out;
}

namespace detail {

inline void write_gray_png(const std::filesystem::path& path, int w, int h,
                           const std::vector<std::uint8_t>& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write PNG '" + path.string() + "': " + msg);
  }
}

inline std::vector<std::uint8_t> read_gray_png(const std::filesystem::path& path, int& w, int& h) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  w = static_cast<int>(image.width);
  h = static_cast<int>(image.height);
  return bytes;
}

} // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(), to_byte);
  detail::write_gray_png(path, img.width, img.height, bytes);
}

inline void write_png(const std::filesystem::path& path, const Mask& m) {
  std::vector<std::uint8_t> bytes(m.bits.size());
  std::transform(m.bits.begin(), m.bits.end(), bytes.begin(),
                 [](std::uint8_t b) { return static_cast<std::uint8_t>(b ? 255 : 0); });
  detail::write_gray_png(path, m.width, m.height, bytes);
}

inline Image read_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = detail::read_gray_png(path, w, h);
  Image img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0f;
  return img;
}

inline Mask read_mask_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  const auto bytes = detail::read_gray_png(path, w, h);
  Mask m(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) m.bits[i] = bytes[i] >= 128 ? 1 : 0;
  return m;
}

} // namespace f2p
