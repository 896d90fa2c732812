#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "crossinject/core.hpp"

namespace crossinject::backends {

/// Text-to-image generator g(.).
class TextToImage {
 public:
  virtual ~TextToImage() = default;
  virtual const std::string& id() const = 0;
  virtual ImageSize output_size() const = 0;
  virtual ImageTensor generate(const std::string& prompt, std::uint64_t seed) const = 0;
};

using T2IPtr = std::shared_ptr<const TextToImage>;

/// Validates the prompt and the produced image; wraps foreign failures in BackendError.
ImageTensor generate_image(const TextToImage& t2i, const std::string& prompt, std::uint64_t seed);

/// Uniform noise keyed by SHA-256(prompt) and the seed.
class NoiseT2I final : public TextToImage {
 public:
  NoiseT2I(std::string id, ImageSize output_size) : id_(std::move(id)), size_(output_size) {}
  const std::string& id() const override { return id_; }
  ImageSize output_size() const override { return size_; }
  ImageTensor generate(const std::string& prompt, std::uint64_t seed) const override;

 private:
  std::string id_;
  ImageSize size_;
};

/// Seed derived from the first eight bytes of SHA-256(text).
std::uint64_t text_seed(const std::string& text);

}  // namespace crossinject::backends
