#include "pforge/image.hpp"

#include <array>
#include <cstdio>

#include <openssl/evp.h>

namespace pforge {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::too_small_input: return "too-small-input";
    case ErrorKind::solver_failed: return "solver-failed";
    case ErrorKind::backend_error: return "backend-error";
    case ErrorKind::degenerate_landmarks: return "degenerate-landmarks";
    case ErrorKind::degenerate_profile: return "degenerate-profile";
    case ErrorKind::generator_unreachable: return "generator-unreachable";
    case ErrorKind::protocol_error: return "protocol-error";
    case ErrorKind::generation_failed: return "generation-failed";
    case ErrorKind::two_step_failed: return "two-step-failed";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

Rgb parse_hex_color(std::string_view hex) {
  if (!hex.empty() && hex.front() == '#') hex.remove_prefix(1);
  if (hex.size() != 6) fail(ErrorKind::invalid_argument, "bad color: " + std::string(hex));
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    fail(ErrorKind::invalid_argument, "bad color: " + std::string(hex));
  };
  auto byte = [&](int i) { return static_cast<std::uint8_t>(nibble(hex[i]) * 16 + nibble(hex[i + 1])); };
  return {byte(0), byte(2), byte(4)};
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::uint8_t fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 1 || height < 1) fail(ErrorKind::invalid_argument, "image dimensions must be >= 1");
  if (channels != 3 && channels != 4) fail(ErrorKind::invalid_argument, "image must have 3 or 4 channels");
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<std::uint8_t> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  if (width < 1 || height < 1) fail(ErrorKind::invalid_argument, "image dimensions must be >= 1");
  if (channels != 3 && channels != 4) fail(ErrorKind::invalid_argument, "image must have 3 or 4 channels");
  if (data_.size() != static_cast<std::size_t>(width) * height * channels)
    fail(ErrorKind::invalid_argument, "image data length does not match dimensions");
}

ImageBuffer ImageBuffer::filled(int width, int height, Rgb color) {
  ImageBuffer img(width, height, 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      img.at(x, y, 0) = color.r;
      img.at(x, y, 1) = color.g;
      img.at(x, y, 2) = color.b;
    }
  return img;
}

Mask::Mask(int width, int height, std::uint8_t fill) : width_(width), height_(height) {
  if (width < 1 || height < 1) fail(ErrorKind::invalid_argument, "mask dimensions must be >= 1");
  data_.assign(static_cast<std::size_t>(width) * height, fill);
}

Mask::Mask(int width, int height, std::vector<std::uint8_t> data)
    : width_(width), height_(height), data_(std::move(data)) {
  if (width < 1 || height < 1) fail(ErrorKind::invalid_argument, "mask dimensions must be >= 1");
  if (data_.size() != static_cast<std::size_t>(width) * height)
    fail(ErrorKind::invalid_argument, "mask data length does not match dimensions");
}

Mask Mask::from_image(const ImageBuffer& img) {
  Mask m(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) m.at(x, y) = img.at(x, y, 0);
  return m;
}

ImageBuffer Mask::to_image() const {
  ImageBuffer img(width_, height_, 3);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = at(x, y);
  return img;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  std::string hex;
  hex.reserve(len * 2);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string content_hash(const ImageBuffer& img) {
  std::vector<std::uint8_t> buf;
  buf.reserve(img.size() + 12);
  for (int v : {img.width(), img.height(), img.channels()})
    for (int shift = 0; shift < 32; shift += 8) buf.push_back(static_cast<std::uint8_t>((v >> shift) & 0xff));
  buf.insert(buf.end(), img.bytes().begin(), img.bytes().end());
  return sha256_hex(buf);
}

}  // namespace pforge
