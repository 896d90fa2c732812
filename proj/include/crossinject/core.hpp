#pragma once

// Domain types shared by every stage of the attack pipeline.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crossinject/errors.hpp"

namespace crossinject {

inline constexpr int kChannels = 3;

struct ImageSize {
  int height = 0;
  int width = 0;
  bool operator==(const ImageSize&) const = default;
};

/// Unconstrained real-valued H x W x 3 array in row-major HWC order.
/// Used for perturbations, gradients and other pixel-shaped quantities.
class PixelArray {
 public:
  PixelArray() = default;
  PixelArray(int height, int width, double fill = 0.0);
  PixelArray(int height, int width, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  ImageSize size() const { return {height_, width_}; }
  std::size_t numel() const { return data_.size(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double max_abs() const;
  bool operator==(const PixelArray&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Unvalidated image payload as it arrives from a file or a backend.
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = kChannels;
  std::vector<double> data;
};

/// Validated image: every value finite and within [0, 1]. Immutable.
class ImageTensor {
 public:
  ImageTensor() = default;

  int height() const { return pixels_.height(); }
  int width() const { return pixels_.width(); }
  ImageSize size() const { return pixels_.size(); }
  std::size_t numel() const { return pixels_.numel(); }
  double at(int y, int x, int c) const { return pixels_.at(y, x, c); }
  std::span<const double> values() const { return pixels_.values(); }
  const PixelArray& pixels() const { return pixels_; }

  /// Validates and wraps; throws RangeError/ShapeError.
  static ImageTensor from_pixels(PixelArray pixels);
  /// Clamps every value to [0, 1] first; non-finite values still throw.
  static ImageTensor clamped(PixelArray pixels);
  static ImageTensor filled(int height, int width, double value);

  bool operator==(const ImageTensor&) const = default;

 private:
  explicit ImageTensor(PixelArray pixels) : pixels_(std::move(pixels)) {}
  PixelArray pixels_;
};

ImageTensor validate_image(const RawImage& raw);
ImageTensor validate_image(const ImageTensor& img);

/// Simulates 8-bit export/import: v -> round(v * 255) / 255. Idempotent.
ImageTensor quantize_roundtrip(const ImageTensor& img);

/// Bilinear resampling (half-pixel centers). Returns the input when sizes match.
ImageTensor resize_bilinear(const ImageTensor& img, ImageSize size);

/// l-infinity budget expressed on the 8-bit scale.
class PixelBudget {
 public:
  explicit PixelBudget(int epsilon_8bit = 16);
  int epsilon_8bit() const { return epsilon_8bit_; }
  double epsilon_norm() const { return static_cast<double>(epsilon_8bit_) / 255.0; }
  bool operator==(const PixelBudget&) const = default;

 private:
  int epsilon_8bit_;
};

/// Binary H x W mask; 1 marks perturbable pixels.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(int height, int width, std::vector<std::uint8_t> bits);
  static PixelMask rectangle(ImageSize size, int top, int left, int patch_h, int patch_w);

  int height() const { return height_; }
  int width() const { return width_; }
  bool allows(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  std::size_t active_count() const;
  bool operator==(const PixelMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Budgeted additive perturbation, stored pre-clamp.
class Perturbation {
 public:
  /// Throws RangeError when the delta leaves the budget or is nonzero off-mask.
  Perturbation(PixelArray delta, PixelBudget budget, std::optional<PixelMask> mask = std::nullopt);
  static Perturbation zeros(ImageSize size, PixelBudget budget,
                            std::optional<PixelMask> mask = std::nullopt);

  const PixelArray& delta() const { return delta_; }
  const PixelBudget& budget() const { return budget_; }
  const std::optional<PixelMask>& mask() const { return mask_; }
  double linf() const { return delta_.max_abs(); }

 private:
  PixelArray delta_;
  PixelBudget budget_;
  std::optional<PixelMask> mask_;
};

/// Project an arbitrary delta onto the budget ball and mask support.
PixelArray project_delta(PixelArray delta, const PixelBudget& budget,
                         const std::optional<PixelMask>& mask);

struct MaliciousInstruction {
  std::string d;
  std::optional<std::string> d_prime;
  std::string target_action;

  /// Throws ArgumentError on empty instruction or target.
  void check() const;
};

/// Default compliance prefix: "Sure, I will " + first clause of d, lowercased initial.
std::string default_target_action(const std::string& instruction);
MaliciousInstruction make_instruction(std::string d,
                                      std::optional<std::string> target_action = std::nullopt);

struct AgentSpec {
  std::string role_name;
  std::string role_description;
  std::string system_prompt;
  std::string planner_backend_id;
  int max_new_tokens = 1024;

  void check() const;
};

enum class Surface { kDocument, kWebpage };

std::string to_string(Surface s);
Surface surface_from_string(const std::string& s);

/// Bytes inserted into a host body by this framework: [offset, offset + length) is everything
/// added (separators, markup), and the payload text itself sits at payload_offset.
struct InjectedSpan {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t payload_offset = 0;
  std::size_t payload_length = 0;
  bool operator==(const InjectedSpan&) const = default;
};

struct ExternalData {
  Surface kind = Surface::kDocument;
  std::string body;
  // Set by the injectors; absent on data read from disk.
  std::optional<InjectedSpan> injected;

  bool operator==(const ExternalData&) const = default;
};

/// Seeds and optimizer settings that produced a bundle.
using Provenance = std::map<std::string, std::string>;

/// The three manipulated channels fed to the victim agent.
class AttackBundle {
 public:
  /// Throws ArgumentError if any channel is missing.
  AttackBundle(std::optional<ImageTensor> adversarial_image,
               std::optional<ExternalData> manipulated_external,
               std::optional<std::string> manipulated_command, Provenance provenance = {});

  const ImageTensor& adversarial_image() const { return image_; }
  const ExternalData& manipulated_external() const { return external_; }
  const std::string& manipulated_command() const { return command_; }
  const Provenance& provenance() const { return provenance_; }

 private:
  ImageTensor image_;
  ExternalData external_;
  std::string command_;
  Provenance provenance_;
};

}  // namespace crossinject
