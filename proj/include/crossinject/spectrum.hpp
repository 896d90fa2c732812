#pragma once

#include "crossinject/core.hpp"

namespace crossinject {

/// Orthonormal 2-D DCT-II per channel (inverse: DCT-III). Orthonormality makes the
/// adjoint of `forward` equal to `inverse`, which the SSA gradient relies on.
/// Backed by FFTW plans created once per image size; execution is thread-safe.
class SpectrumTransform {
 public:
  explicit SpectrumTransform(ImageSize size);
  ~SpectrumTransform();
  SpectrumTransform(const SpectrumTransform&) = delete;
  SpectrumTransform& operator=(const SpectrumTransform&) = delete;

  ImageSize size() const { return size_; }
  PixelArray forward(const PixelArray& x) const;
  PixelArray inverse(const PixelArray& coeffs) const;

 private:
  PixelArray run(const PixelArray& in, bool forward) const;
  ImageSize size_;
  void* forward_plan_ = nullptr;
  void* inverse_plan_ = nullptr;
};

}  // namespace crossinject
