#include "crossinject/backends/vision.hpp"

#include <cmath>
#include <random>

namespace crossinject::backends {

namespace {

void check_input(const VisionEncoder& enc, const ImageTensor& image) {
  if (image.size() != enc.input_size()) {
    throw ShapeError("encoder '" + enc.id() + "' expects " + std::to_string(enc.input_size().height) +
                     "x" + std::to_string(enc.input_size().width) + " input, got " +
                     std::to_string(image.height()) + "x" + std::to_string(image.width()));
  }
}

void check_cotangent(const VisionEncoder& enc, std::span<const double> cotangent) {
  if (cotangent.size() != static_cast<std::size_t>(enc.embedding_dim())) {
    throw ShapeError("cotangent length " + std::to_string(cotangent.size()) +
                     " does not match embedding_dim " + std::to_string(enc.embedding_dim()));
  }
}

}  // namespace

PixelArray VisionEncoder::pullback(const ImageTensor&, std::span<const double>) const {
  throw CapabilityError("encoder '" + id() + "' does not provide gradients");
}

std::vector<Embedding> embed(const VisionEncoder& encoder, std::span<const ImageTensor> images) {
  std::vector<Embedding> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    check_input(encoder, img);
    out.push_back(encoder.embed(img));
  }
  return out;
}

PixelArray embed_pullback(const VisionEncoder& encoder, const ImageTensor& image,
                          std::span<const double> cotangent) {
  if (!encoder.supports_gradient()) {
    throw CapabilityError("encoder '" + encoder.id() + "' does not provide gradients");
  }
  check_input(encoder, image);
  check_cotangent(encoder, cotangent);
  return encoder.pullback(image, cotangent);
}

LinearEncoder::LinearEncoder(std::string id, ImageSize input_size, int embedding_dim,
                             std::uint64_t seed)
    : id_(std::move(id)), input_size_(input_size), dim_(embedding_dim) {
  if (embedding_dim < 1) throw ArgumentError("embedding_dim must be >= 1");
  const std::size_t n = static_cast<std::size_t>(input_size.height) * input_size.width * kChannels;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(n)));
  matrix_.resize(n * static_cast<std::size_t>(embedding_dim));
  for (auto& v : matrix_) v = gauss(rng);
}

LinearEncoder::LinearEncoder(std::string id, ImageSize input_size, int embedding_dim,
                             std::vector<double> matrix)
    : id_(std::move(id)), input_size_(input_size), dim_(embedding_dim), matrix_(std::move(matrix)) {
  if (embedding_dim < 1) throw ArgumentError("embedding_dim must be >= 1");
  const std::size_t n = static_cast<std::size_t>(input_size.height) * input_size.width * kChannels;
  if (matrix_.size() != n * static_cast<std::size_t>(embedding_dim)) {
    throw ShapeError("projection matrix size does not match input size and embedding_dim");
  }
}

std::span<const double> LinearEncoder::row(int j) const {
  const std::size_t n = matrix_.size() / static_cast<std::size_t>(dim_);
  return std::span<const double>(matrix_).subspan(static_cast<std::size_t>(j) * n, n);
}

Embedding LinearEncoder::embed(const ImageTensor& image) const {
  check_input(*this, image);
  const auto x = image.values();
  const std::size_t n = x.size();
  Embedding out(static_cast<std::size_t>(dim_), 0.0);
  // Four rows per pass share the loads of x; each row is still summed left to right.
  int j = 0;
  for (; j + 4 <= dim_; j += 4) {
    const double* r0 = row(j).data();
    const double* r1 = row(j + 1).data();
    const double* r2 = row(j + 2).data();
    const double* r3 = row(j + 3).data();
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      a0 += r0[i] * x[i];
      a1 += r1[i] * x[i];
      a2 += r2[i] * x[i];
      a3 += r3[i] * x[i];
    }
    out[static_cast<std::size_t>(j)] = a0;
    out[static_cast<std::size_t>(j + 1)] = a1;
    out[static_cast<std::size_t>(j + 2)] = a2;
    out[static_cast<std::size_t>(j + 3)] = a3;
  }
  for (; j < dim_; ++j) {
    const auto r = row(j);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += r[i] * x[i];
    out[static_cast<std::size_t>(j)] = acc;
  }
  return out;
}

PixelArray LinearEncoder::pullback(const ImageTensor& image, std::span<const double> cotangent) const {
  check_input(*this, image);
  check_cotangent(*this, cotangent);
  PixelArray grad(input_size_.height, input_size_.width);
  auto g = grad.values();
  const std::size_t n = g.size();
  std::vector<int> active;
  for (int j = 0; j < dim_; ++j) {
    if (cotangent[static_cast<std::size_t>(j)] != 0.0) active.push_back(j);
  }
  // Same per-element accumulation order as one row at a time.
  std::size_t k = 0;
  for (; k + 4 <= active.size(); k += 4) {
    const double v0 = cotangent[static_cast<std::size_t>(active[k])];
    const double v1 = cotangent[static_cast<std::size_t>(active[k + 1])];
    const double v2 = cotangent[static_cast<std::size_t>(active[k + 2])];
    const double v3 = cotangent[static_cast<std::size_t>(active[k + 3])];
    const double* r0 = row(active[k]).data();
    const double* r1 = row(active[k + 1]).data();
    const double* r2 = row(active[k + 2]).data();
    const double* r3 = row(active[k + 3]).data();
    for (std::size_t i = 0; i < n; ++i) g[i] = (((g[i] + v0 * r0[i]) + v1 * r1[i]) + v2 * r2[i]) + v3 * r3[i];
  }
  for (; k < active.size(); ++k) {
    const double v = cotangent[static_cast<std::size_t>(active[k])];
    const auto r = row(active[k]);
    for (std::size_t i = 0; i < n; ++i) g[i] += v * r[i];
  }
  return grad;
}

ScaledEncoder::ScaledEncoder(EncoderPtr inner, double scale) : inner_(std::move(inner)), scale_(scale) {
  if (!(scale > 0.0)) throw ArgumentError("encoder scale must be positive");
}

Embedding ScaledEncoder::embed(const ImageTensor& image) const {
  auto e = inner_->embed(image);
  for (auto& v : e) v *= scale_;
  return e;
}

PixelArray ScaledEncoder::pullback(const ImageTensor& image, std::span<const double> cotangent) const {
  auto g = inner_->pullback(image, cotangent);
  for (auto& v : g.values()) v *= scale_;
  return g;
}

ThumbnailEncoder::ThumbnailEncoder(std::string id, ImageSize input_size)
    : id_(std::move(id)), input_size_(input_size) {}

Embedding ThumbnailEncoder::embed(const ImageTensor& image) const {
  check_input(*this, image);
  Embedding out(4 * 4 * kChannels, 0.0);
  std::vector<int> counts(4 * 4, 0);
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const int cell = (y * 4 / image.height()) * 4 + (x * 4 / image.width());
      ++counts[static_cast<std::size_t>(cell)];
      for (int c = 0; c < kChannels; ++c) {
        out[static_cast<std::size_t>(cell * kChannels + c)] += image.at(y, x, c);
      }
    }
  }
  for (int cell = 0; cell < 16; ++cell) {
    for (int c = 0; c < kChannels; ++c) {
      out[static_cast<std::size_t>(cell * kChannels + c)] /= std::max(1, counts[static_cast<std::size_t>(cell)]);
    }
  }
  return out;
}

}  // namespace crossinject::backends
