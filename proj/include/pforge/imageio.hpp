#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pforge/image.hpp"

namespace pforge {

/// Decodes PNG or JPEG (sniffed from the signature). Gray and gray+alpha
/// PNGs are expanded to RGB / RGBA; 16-bit PNGs are reduced to 8 bits.
ImageBuffer decode_image(std::span<const std::uint8_t> bytes);

/// 8-bit, non-interlaced, fixed compression settings, no timestamp chunk.
std::vector<std::uint8_t> encode_png(const ImageBuffer& img);
std::vector<std::uint8_t> encode_png(const Mask& mask);
std::vector<std::uint8_t> encode_jpeg(const ImageBuffer& img, int quality = 95);

ImageBuffer read_image(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);
/// Format chosen from the extension (.png, .jpg, .jpeg); anything else is PNG.
void write_image(const std::filesystem::path& path, const ImageBuffer& img);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

inline std::string png_base64(const ImageBuffer& img) { return base64_encode(encode_png(img)); }
inline ImageBuffer image_from_base64(std::string_view text) { return decode_image(base64_decode(text)); }

bool is_image_path(const std::filesystem::path& path);

}  // namespace pforge
