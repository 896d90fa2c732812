#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "crossinject/core.hpp"

namespace crossinject::backends {

using Embedding = std::vector<double>;

/// Surrogate image encoder f_k. Implementations must be safe for concurrent calls.
class VisionEncoder {
 public:
  virtual ~VisionEncoder() = default;

  virtual const std::string& id() const = 0;
  virtual ImageSize input_size() const = 0;
  virtual int embedding_dim() const = 0;
  virtual bool supports_gradient() const { return false; }

  virtual Embedding embed(const ImageTensor& image) const = 0;

  /// Gradient of <embed(image), cotangent> with respect to the image pixels.
  virtual PixelArray pullback(const ImageTensor& image, std::span<const double> cotangent) const;
};

using EncoderPtr = std::shared_ptr<const VisionEncoder>;

std::vector<Embedding> embed(const VisionEncoder& encoder, std::span<const ImageTensor> images);
PixelArray embed_pullback(const VisionEncoder& encoder, const ImageTensor& image,
                          std::span<const double> cotangent);

/// embed(x) = M * flatten(x), M drawn i.i.d. N(0, 1/sqrt(n)) from a seed.
class LinearEncoder final : public VisionEncoder {
 public:
  LinearEncoder(std::string id, ImageSize input_size, int embedding_dim, std::uint64_t seed);
  /// Explicit projection, row-major embedding_dim x (H*W*3).
  LinearEncoder(std::string id, ImageSize input_size, int embedding_dim, std::vector<double> matrix);

  const std::string& id() const override { return id_; }
  ImageSize input_size() const override { return input_size_; }
  int embedding_dim() const override { return dim_; }
  bool supports_gradient() const override { return true; }

  Embedding embed(const ImageTensor& image) const override;
  PixelArray pullback(const ImageTensor& image, std::span<const double> cotangent) const override;

  std::span<const double> row(int j) const;
  std::span<const double> matrix() const { return matrix_; }

 private:
  std::string id_;
  ImageSize input_size_;
  int dim_;
  std::vector<double> matrix_;
};

/// Multiplies another encoder's output by a positive constant.
class ScaledEncoder final : public VisionEncoder {
 public:
  ScaledEncoder(EncoderPtr inner, double scale);

  const std::string& id() const override { return inner_->id(); }
  ImageSize input_size() const override { return inner_->input_size(); }
  int embedding_dim() const override { return inner_->embedding_dim(); }
  bool supports_gradient() const override { return inner_->supports_gradient(); }

  Embedding embed(const ImageTensor& image) const override;
  PixelArray pullback(const ImageTensor& image, std::span<const double> cotangent) const override;

 private:
  EncoderPtr inner_;
  double scale_;
};

/// Forward-only encoder: 4x4 average-pooled thumbnail. Has no pullback.
class ThumbnailEncoder final : public VisionEncoder {
 public:
  ThumbnailEncoder(std::string id, ImageSize input_size);

  const std::string& id() const override { return id_; }
  ImageSize input_size() const override { return input_size_; }
  int embedding_dim() const override { return 4 * 4 * kChannels; }
  Embedding embed(const ImageTensor& image) const override;

 private:
  std::string id_;
  ImageSize input_size_;
};

}  // namespace crossinject::backends
