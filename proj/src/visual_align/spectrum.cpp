#include "crossinject/spectrum.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <vector>

namespace crossinject {

namespace {

// The FFTW planner is not re-entrant.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

// Scale factors turning FFTW's unnormalized REDFT10/REDFT01 into orthonormal transforms.
double forward_scale(int k, int n) {
  return (k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n)) / 2.0;
}

double inverse_scale(int k, int n) {
  return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n) / 2.0;
}

}  // namespace

SpectrumTransform::SpectrumTransform(ImageSize size) : size_(size) {
  if (size.height <= 0 || size.width <= 0) throw ShapeError("spectrum transform needs a positive size");
  std::vector<double> a(static_cast<std::size_t>(size.height) * size.width);
  std::vector<double> b(a.size());
  std::lock_guard lock(planner_mutex());
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  forward_plan_ = fftw_plan_r2r_2d(size.height, size.width, a.data(), b.data(), FFTW_REDFT10,
                                   FFTW_REDFT10, flags);
  inverse_plan_ = fftw_plan_r2r_2d(size.height, size.width, a.data(), b.data(), FFTW_REDFT01,
                                   FFTW_REDFT01, flags);
  if (!forward_plan_ || !inverse_plan_) throw Error("FFTW could not create DCT plans");
}

SpectrumTransform::~SpectrumTransform() {
  std::lock_guard lock(planner_mutex());
  if (forward_plan_) fftw_destroy_plan(static_cast<fftw_plan>(forward_plan_));
  if (inverse_plan_) fftw_destroy_plan(static_cast<fftw_plan>(inverse_plan_));
}

PixelArray SpectrumTransform::forward(const PixelArray& x) const { return run(x, true); }

PixelArray SpectrumTransform::inverse(const PixelArray& coeffs) const { return run(coeffs, false); }

PixelArray SpectrumTransform::run(const PixelArray& in, bool forward) const {
  if (in.size() != size_) throw ShapeError("spectrum transform size mismatch");
  const int h = size_.height;
  const int w = size_.width;
  std::vector<double> plane(static_cast<std::size_t>(h) * w);
  std::vector<double> out_plane(plane.size());
  PixelArray out(h, w);
  for (int c = 0; c < kChannels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = in.at(y, x, c);
        if (!forward) v *= inverse_scale(y, h) * inverse_scale(x, w);
        plane[static_cast<std::size_t>(y) * w + x] = v;
      }
    }
    fftw_execute_r2r(static_cast<fftw_plan>(forward ? forward_plan_ : inverse_plan_), plane.data(),
                     out_plane.data());
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = out_plane[static_cast<std::size_t>(y) * w + x];
        if (forward) v *= forward_scale(y, h) * forward_scale(x, w);
        out.at(y, x, c) = v;
      }
    }
  }
  return out;
}

}  // namespace crossinject
