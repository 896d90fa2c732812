#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "crossinject/core.hpp"

namespace crossinject {

std::string sha256_hex(std::string_view bytes);
/// Digest over the 8-bit quantized pixel values plus the shape.
std::string image_digest(const ImageTensor& img);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
/// Writes bytes verbatim, creating parent directories.
void write_text_file(const std::filesystem::path& path, std::string_view bytes);

/// Interleaved 8-bit RGB bytes, one per channel value.
std::vector<std::uint8_t> to_rgb8(const ImageTensor& img);
ImageTensor from_rgb8(int height, int width, const std::vector<std::uint8_t>& rgb);

/// Reads .png or binary .ppm (P6, maxval 255); other extensions are rejected.
ImageTensor read_image(const std::filesystem::path& path);
/// Writes .png or .ppm; values are quantized to 8 bits on the way out.
void write_image(const std::filesystem::path& path, const ImageTensor& img);

}  // namespace crossinject
