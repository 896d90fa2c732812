#pragma once

// Victim-agent simulation and the input-level defenses evaluated against it.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crossinject/backends/chat.hpp"
#include "crossinject/core.hpp"

namespace crossinject::harness {

using backends::PromptPart;

inline constexpr const char* kExternalLabel = "external";
inline constexpr const char* kCommandLabel = "command";
inline constexpr const char* kReminderLabel = "reminder";
inline constexpr const char* kSystemLabel = "system";
inline constexpr const char* kRetrievedContextHeader = "Retrieved context:\n";

struct AgentInputs {
  ImageTensor image;
  ExternalData external;
  std::string command;

  bool operator==(const AgentInputs&) const = default;
};

/// "Retrieved context:\n" + body.
std::string render_external(const ExternalData& e);

/// [image, external, command]: the only order the planner ever sees.
std::vector<PromptPart> planner_parts(const AgentInputs& inputs);

struct DefenseConfig {
  bool sandwich = false;
  bool blur = false;
  int blur_kernel = 9;
  /// Unset means blur_kernel / 6.
  std::optional<double> blur_sigma;

  double effective_sigma() const { return blur_sigma ? *blur_sigma : blur_kernel / 6.0; }
  /// Throws ConfigError on an even or non-positive kernel or a non-positive sigma.
  void check() const;
  bool operator==(const DefenseConfig&) const = default;
};

struct PlannerCall {
  std::string backend_id;
  std::string system;
  std::vector<PromptPart> parts;
  std::string response;
};

/// One JSON object per call; images are logged by digest.
std::string call_log_line(const std::string& trial_id, const PlannerCall& call);

/// Role fixture: JSON with role_name, role_description and system_prompt.
AgentSpec load_role(const std::filesystem::path& path, const std::string& planner_backend_id);

/// Planner call with explicit parts. Appends to `log` when given.
std::string run_agent_parts(const AgentSpec& agent, const backends::ChatBackend& planner,
                            const std::vector<PromptPart>& parts, std::vector<PlannerCall>* log = nullptr);

/// response = planner(S, [I, E, C]), truncated to max_new_tokens.
std::string run_agent(const AgentSpec& agent, const backends::ChatBackend& planner, const AgentInputs& inputs,
                      std::vector<PlannerCall>* log = nullptr);

/// Reminder text from a template with {ROLE_NAME} and {ROLE_DESCRIPTION} slots.
std::string render_reminder(const std::string& tmpl, const AgentSpec& agent);

/// [system, external, command, reminder]. Throws ArgumentError on an empty reminder or when
/// the inputs already carry the reminder.
std::vector<PromptPart> sandwich_wrap(const std::string& system, const std::string& external_text,
                                      const std::string& command, const std::string& reminder);

/// Normalized 1-D Gaussian weights.
std::vector<double> gaussian_kernel_1d(int kernel, double sigma);
/// Normalized kernel x kernel weights, row-major.
std::vector<double> gaussian_kernel_2d(int kernel, double sigma);

/// Separable per-channel Gaussian convolution with reflect padding (edge pixel not repeated).
ImageTensor gaussian_blur(const ImageTensor& image, int kernel, double sigma);

struct DefendedInputs {
  AgentInputs inputs;
  /// Set when the sandwich defense replaces the default part list.
  std::optional<std::vector<PromptPart>> parts;

  /// The parts the planner receives.
  std::vector<PromptPart> planner_view() const;
};

/// Blur first, then wrap; an all-false config returns the inputs untouched.
DefendedInputs apply_defenses(const AgentInputs& inputs, const DefenseConfig& cfg, const AgentSpec& agent,
                              const std::string& reminder);

std::string run_defended(const AgentSpec& agent, const backends::ChatBackend& planner, const AgentInputs& inputs,
                         const DefenseConfig& cfg, const std::string& reminder,
                         std::vector<PlannerCall>* log = nullptr);

/// run_agent on the bundle's channels. The bundle command must contain the original command.
std::string run_attacked(const AgentSpec& agent, const backends::ChatBackend& planner, const AttackBundle& bundle,
                         const std::string& original_command, const DefenseConfig& defense = {},
                         const std::string& reminder = {}, std::vector<PlannerCall>* log = nullptr);

}  // namespace crossinject::harness
