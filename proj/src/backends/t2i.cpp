#include "crossinject/backends/t2i.hpp"

#include <random>

#include "crossinject/io.hpp"

namespace crossinject::backends {

std::uint64_t text_seed(const std::string& text) {
  const std::string hex = sha256_hex(text);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

ImageTensor NoiseT2I::generate(const std::string& prompt, std::uint64_t seed) const {
  std::mt19937_64 rng(text_seed(prompt) ^ (seed * 0x9E3779B97F4A7C15ULL));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  PixelArray px(size_.height, size_.width);
  for (auto& v : px.values()) v = unif(rng);
  return ImageTensor::from_pixels(std::move(px));
}

ImageTensor generate_image(const TextToImage& t2i, const std::string& prompt, std::uint64_t seed) {
  if (prompt.empty()) throw ArgumentError("text-to-image prompt must be non-empty");
  ImageTensor img;
  try {
    img = t2i.generate(prompt, seed);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError("text-to-image backend '" + t2i.id() + "' failed: " + e.what());
  }
  if (img.size() != t2i.output_size()) {
    throw BackendError("text-to-image backend '" + t2i.id() + "' returned an image of the wrong size");
  }
  return validate_image(img);
}

}  // namespace crossinject::backends
