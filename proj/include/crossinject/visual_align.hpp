#pragma once

// Visual latent alignment: push the ensemble embeddings of I + delta towards those of a
// generated image I_t that depicts the injected instruction.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crossinject/backends/chat.hpp"
#include "crossinject/backends/t2i.hpp"
#include "crossinject/backends/vision.hpp"
#include "crossinject/core.hpp"

namespace crossinject::visual {

enum class FeatureNorm { kL2, kLinf };

std::string to_string(FeatureNorm n);
FeatureNorm feature_norm_from_string(const std::string& s);

struct VisualOptConfig {
  PixelBudget budget{16};
  int iterations = 200;
  double step_size = 1.0 / 255.0;
  std::vector<std::string> encoder_ids;
  int ssa_samples = 8;
  double ssa_rho = 0.5;
  double ssa_sigma = 16.0 / 255.0;
  double momentum = 0.9;
  /// CWA reverse/inner step; negative means "same as step_size".
  double inner_step = -1.0;
  FeatureNorm norm = FeatureNorm::kL2;
  std::optional<PixelMask> mask;
  std::uint64_t seed = 0;

  double effective_inner_step() const { return inner_step < 0.0 ? step_size : inner_step; }
  /// Throws ConfigError on invalid settings.
  void check() const;
  bool operator==(const VisualOptConfig&) const = default;
};

struct TraceRecord {
  int iteration = 0;
  double loss = 0.0;
  double linf = 0.0;
};

struct VisualTrace {
  double initial_loss = 0.0;
  std::vector<TraceRecord> records;
  double best_loss = 0.0;
  /// 0 means the zero initialization was never beaten.
  int best_iteration = 0;
  std::optional<Perturbation> best_delta;
};

// --- target acquisition -------------------------------------------------------------

/// Slots of a descriptive text-to-image prompt.
struct DescriptivePrompt {
  std::string subject;
  std::string action;
  std::string context;
  std::string render() const;
};

/// Rule-based rewrite of an imperative instruction into subject/action/context slots.
DescriptivePrompt describe_instruction(const std::string& d);

/// Template path: always succeeds for a non-empty d.
MaliciousInstruction reformulate_instruction(MaliciousInstruction instr);
/// LLM path: asks `constructor` for the descriptive prompt. Throws BackendError on failure.
MaliciousInstruction reformulate_instruction(MaliciousInstruction instr, const backends::ChatBackend& constructor);

/// I_t = g(d'). Requires d_prime.
ImageTensor acquire_target_image(const MaliciousInstruction& instr, const backends::TextToImage& t2i,
                                 std::uint64_t seed);

// --- loss and gradient --------------------------------------------------------------

using EncoderList = std::vector<backends::EncoderPtr>;

/// Orders encoders by id (accumulation order for deterministic sums).
EncoderList sorted_by_id(EncoderList encoders);

/// Mean over encoders of the norm of the difference between unit-normalized features of
/// clamp(I + delta) and I_t.
double visual_loss(const ImageTensor& image, const PixelArray& delta, const ImageTensor& target,
                   const EncoderList& encoders, FeatureNorm norm = FeatureNorm::kL2);
double visual_loss(const ImageTensor& image, const Perturbation& delta, const ImageTensor& target,
                   const EncoderList& encoders, FeatureNorm norm = FeatureNorm::kL2);

/// d visual_loss / d delta, assembled from encoder pullbacks. Coordinates where I + delta is
/// clamped receive zero gradient.
PixelArray visual_loss_gradient(const ImageTensor& image, const PixelArray& delta, const ImageTensor& target,
                                const EncoderList& encoders, FeatureNorm norm = FeatureNorm::kL2);

/// Cosine similarity of the two images' embeddings under one encoder.
double embedding_cosine(const backends::VisionEncoder& encoder, const ImageTensor& a, const ImageTensor& b);

// --- spectrum simulation augmentation -----------------------------------------------

/// Each sample = clamp(IDCT(DCT(x + N(0, sigma^2)) * U(1 - rho, 1 + rho))).
std::vector<ImageTensor> ssa_augment(const ImageTensor& x, const VisualOptConfig& cfg, std::mt19937_64& rng);

// --- optimization -------------------------------------------------------------------

using TraceSink = std::function<void(const TraceRecord&)>;

struct OptimizationResult {
  Perturbation perturbation;
  VisualTrace trace;
};

/// Momentum sign descent on the ensemble loss with SSA-averaged gradients and a CWA
/// reverse/inner step; returns the best iterate (the zero start included).
/// `sink` sees every record as it is produced, so a failing backend leaves a partial trace.
OptimizationResult optimize_perturbation(const ImageTensor& image, const ImageTensor& target,
                                         const VisualOptConfig& cfg, const EncoderList& encoders,
                                         const TraceSink& sink = {});

/// clamp(I + delta, 0, 1).
ImageTensor apply_perturbation(const ImageTensor& image, const Perturbation& p);

/// Gaussian noise N(0, eps^2) clipped to the budget (and mask). Ablation baseline.
Perturbation random_perturbation(ImageSize size, const PixelBudget& budget,
                                 const std::optional<PixelMask>& mask, std::uint64_t seed);

/// One JSON object per line: {"iteration":i,"loss":l,"linf":m}.
std::string trace_record_line(const TraceRecord& r);

}  // namespace crossinject::visual
