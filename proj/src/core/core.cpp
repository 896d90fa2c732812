#include "crossinject/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace crossinject {

namespace {

constexpr double kBudgetSlack = 1e-9;

void check_dims(int height, int width) {
  if (height <= 0 || width <= 0) {
    std::ostringstream os;
    os << "image dimensions must be positive, got " << height << "x" << width;
    throw ShapeError(os.str());
  }
}

}  // namespace

PixelArray::PixelArray(int height, int width, double fill)
    : height_(height), width_(width) {
  check_dims(height, width);
  data_.assign(static_cast<std::size_t>(height) * width * kChannels, fill);
}

PixelArray::PixelArray(int height, int width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
  check_dims(height, width);
  const std::size_t expected = static_cast<std::size_t>(height) * width * kChannels;
  if (data_.size() != expected) {
    std::ostringstream os;
    os << "pixel data has " << data_.size() << " values, expected " << expected;
    throw ShapeError(os.str());
  }
}

double PixelArray::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

ImageTensor ImageTensor::from_pixels(PixelArray pixels) {
  for (int y = 0; y < pixels.height(); ++y) {
    for (int x = 0; x < pixels.width(); ++x) {
      for (int c = 0; c < kChannels; ++c) {
        const double v = pixels.at(y, x, c);
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
          std::ostringstream os;
          os << "pixel (" << y << ", " << x << ", " << c << ") = " << v
             << " outside [0, 1]";
          throw RangeError(os.str());
        }
      }
    }
  }
  return ImageTensor(std::move(pixels));
}

ImageTensor ImageTensor::clamped(PixelArray pixels) {
  for (double& v : pixels.values()) {
    if (!std::isfinite(v)) throw RangeError("non-finite pixel value");
    v = std::clamp(v, 0.0, 1.0);
  }
  return ImageTensor(std::move(pixels));
}

ImageTensor ImageTensor::filled(int height, int width, double value) {
  return from_pixels(PixelArray(height, width, value));
}

ImageTensor validate_image(const RawImage& raw) {
  if (raw.channels != kChannels) {
    std::ostringstream os;
    os << "expected " << kChannels << " channels, got " << raw.channels;
    throw ShapeError(os.str());
  }
  return ImageTensor::from_pixels(PixelArray(raw.height, raw.width, raw.data));
}

ImageTensor validate_image(const ImageTensor& img) {
  return ImageTensor::from_pixels(img.pixels());
}

ImageTensor quantize_roundtrip(const ImageTensor& img) {
  PixelArray out = img.pixels();
  for (double& v : out.values()) v = std::round(v * 255.0) / 255.0;
  return ImageTensor::from_pixels(std::move(out));
}

ImageTensor resize_bilinear(const ImageTensor& img, ImageSize size) {
  if (img.size() == size) return img;
  check_dims(size.height, size.width);
  PixelArray out(size.height, size.width);
  const double sy = static_cast<double>(img.height()) / size.height;
  const double sx = static_cast<double>(img.width()) / size.width;
  for (int y = 0; y < size.height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size.width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < kChannels; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bottom = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return ImageTensor::clamped(std::move(out));
}

PixelBudget::PixelBudget(int epsilon_8bit) : epsilon_8bit_(epsilon_8bit) {
  if (epsilon_8bit < 0 || epsilon_8bit > 255) {
    throw RangeError("epsilon_8bit must lie in [0, 255], got " + std::to_string(epsilon_8bit));
  }
}

PixelMask::PixelMask(int height, int width, std::vector<std::uint8_t> bits)
    : height_(height), width_(width), bits_(std::move(bits)) {
  check_dims(height, width);
  if (bits_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("mask size does not match its declared dimensions");
  }
  for (auto& b : bits_) b = b ? 1 : 0;
}

PixelMask PixelMask::rectangle(ImageSize size, int top, int left, int patch_h, int patch_w) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(size.height) * size.width, 0);
  for (int y = std::max(0, top); y < std::min(size.height, top + patch_h); ++y) {
    for (int x = std::max(0, left); x < std::min(size.width, left + patch_w); ++x) {
      bits[static_cast<std::size_t>(y) * size.width + x] = 1;
    }
  }
  return PixelMask(size.height, size.width, std::move(bits));
}

std::size_t PixelMask::active_count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

Perturbation::Perturbation(PixelArray delta, PixelBudget budget, std::optional<PixelMask> mask)
    : delta_(std::move(delta)), budget_(budget), mask_(std::move(mask)) {
  if (mask_ && (mask_->height() != delta_.height() || mask_->width() != delta_.width())) {
    throw ShapeError("mask shape does not match perturbation shape");
  }
  const double limit = budget_.epsilon_norm() + kBudgetSlack;
  for (int y = 0; y < delta_.height(); ++y) {
    for (int x = 0; x < delta_.width(); ++x) {
      const bool on = !mask_ || mask_->allows(y, x);
      for (int c = 0; c < kChannels; ++c) {
        const double v = delta_.at(y, x, c);
        if (!std::isfinite(v) || std::abs(v) > limit) {
          std::ostringstream os;
          os << "delta (" << y << ", " << x << ", " << c << ") = " << v << " exceeds budget "
             << budget_.epsilon_norm();
          throw RangeError(os.str());
        }
        if (!on && v != 0.0) throw RangeError("delta is nonzero outside the mask");
      }
    }
  }
}

Perturbation Perturbation::zeros(ImageSize size, PixelBudget budget, std::optional<PixelMask> mask) {
  return Perturbation(PixelArray(size.height, size.width), budget, std::move(mask));
}

PixelArray project_delta(PixelArray delta, const PixelBudget& budget,
                         const std::optional<PixelMask>& mask) {
  const double eps = budget.epsilon_norm();
  for (int y = 0; y < delta.height(); ++y) {
    for (int x = 0; x < delta.width(); ++x) {
      const bool on = !mask || mask->allows(y, x);
      for (int c = 0; c < kChannels; ++c) {
        double& v = delta.at(y, x, c);
        v = on ? std::clamp(v, -eps, eps) : 0.0;
      }
    }
  }
  return delta;
}

void MaliciousInstruction::check() const {
  if (d.empty()) throw ArgumentError("malicious instruction d must be non-empty");
  if (target_action.empty()) throw ArgumentError("target action must be non-empty");
}

std::string default_target_action(const std::string& instruction) {
  const auto end = instruction.find_first_of(".,;:!?\n");
  std::string clause = instruction.substr(0, end);
  while (!clause.empty() && std::isspace(static_cast<unsigned char>(clause.back()))) clause.pop_back();
  if (!clause.empty()) {
    clause[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(clause[0])));
  }
  return "Sure, I will " + clause;
}

MaliciousInstruction make_instruction(std::string d, std::optional<std::string> target_action) {
  MaliciousInstruction instr;
  instr.target_action = target_action ? *target_action : default_target_action(d);
  instr.d = std::move(d);
  instr.check();
  return instr;
}

void AgentSpec::check() const {
  if (system_prompt.empty()) throw ArgumentError("agent system prompt must be non-empty");
  if (max_new_tokens < 1) throw ArgumentError("max_new_tokens must be >= 1");
}

std::string to_string(Surface s) {
  return s == Surface::kDocument ? "document" : "webpage";
}

Surface surface_from_string(const std::string& s) {
  if (s == "document") return Surface::kDocument;
  if (s == "webpage") return Surface::kWebpage;
  throw ArgumentError("unknown external-data surface '" + s + "'");
}

AttackBundle::AttackBundle(std::optional<ImageTensor> adversarial_image,
                           std::optional<ExternalData> manipulated_external,
                           std::optional<std::string> manipulated_command, Provenance provenance)
    : provenance_(std::move(provenance)) {
  if (!adversarial_image) throw ArgumentError("attack bundle is missing the visual channel");
  if (!manipulated_external) throw ArgumentError("attack bundle is missing the external-data channel");
  if (!manipulated_command) throw ArgumentError("attack bundle is missing the command channel");
  image_ = std::move(*adversarial_image);
  external_ = std::move(*manipulated_external);
  command_ = std::move(*manipulated_command);
}

}  // namespace crossinject
