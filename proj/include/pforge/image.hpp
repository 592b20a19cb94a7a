#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pforge/error.hpp"

namespace pforge {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Parses "#rrggbb" or "rrggbb".
Rgb parse_hex_color(std::string_view hex);

/// 8-bit interleaved raster, row-major, top-left origin, 3 or 4 channels.
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, std::uint8_t fill = 0);
  ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> data);

  static ImageBuffer filled(int width, int height, Rgb color);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::uint8_t& at(int x, int y, int c) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::span<const std::uint8_t> bytes() const noexcept { return data_; }
  std::span<std::uint8_t> bytes() noexcept { return data_; }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Single-channel 8-bit mask; 255 marks the subject / foreground.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height, std::uint8_t fill = 0);
  Mask(int width, int height, std::vector<std::uint8_t> data);

  /// Takes the first channel of a decoded image.
  static Mask from_image(const ImageBuffer& img);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::uint8_t& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  std::uint8_t at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const std::uint8_t> bytes() const noexcept { return data_; }

  ImageBuffer to_image() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Float working plane for one channel, row-major like the byte raster.
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
Plane<Scalar> channel_plane(const ImageBuffer& img, int channel) {
  Plane<Scalar> plane(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) plane(y, x) = static_cast<Scalar>(img.at(x, y, channel));
  return plane;
}

/// Round half up, then clamp into [0, 255].
inline std::uint8_t to_byte(double v) {
  const double r = std::floor(v + 0.5);
  if (!(r > 0.0)) return 0;
  if (r > 255.0) return 255;
  return static_cast<std::uint8_t>(r);
}

/// Lowercase hex SHA-256 of (width, height, channels, samples).
std::string content_hash(const ImageBuffer& img);
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace pforge
