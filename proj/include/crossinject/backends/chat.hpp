#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crossinject/core.hpp"

namespace crossinject::backends {

enum class ChatRole { kPlanner, kJudge, kMetaConstructor };

std::string to_string(ChatRole role);
ChatRole chat_role_from_string(const std::string& s);

/// One element of the ordered user message. `label` names the channel
/// ("image", "external", "command", "reminder", ...).
struct PromptPart {
  std::string label;
  std::string text;
  std::optional<ImageTensor> image;

  static PromptPart text_part(std::string label, std::string text);
  static PromptPart image_part(ImageTensor image);
  bool is_image() const { return image.has_value(); }
};

class ChatBackend {
 public:
  ChatBackend(std::string id, ChatRole role) : id_(std::move(id)), role_(role) {}
  virtual ~ChatBackend() = default;

  const std::string& id() const { return id_; }
  ChatRole role() const { return role_; }

  virtual std::string complete(const std::string& system, std::span<const PromptPart> parts,
                               int max_tokens) const = 0;

 private:
  std::string id_;
  ChatRole role_;
};

using ChatPtr = std::shared_ptr<const ChatBackend>;

/// Calls the backend and truncates the reply to `max_tokens` whitespace-delimited tokens.
/// Foreign exceptions surface as BackendError.
std::string chat_complete(const ChatBackend& chat, const std::string& system,
                          std::span<const PromptPart> parts, int max_tokens);

/// Keeps the first `max_tokens` whitespace-delimited tokens (and the spacing between them).
std::string truncate_tokens(const std::string& text, int max_tokens);

inline constexpr const char* kInjectedTaskMarker = "[INJECTED-TASK]";
inline constexpr const char* kGenericInRoleMarker = "[IN-ROLE]";

struct ScriptedPlannerOptions {
  /// Instructions the planner recognizes inside retrieved context.
  std::vector<std::string> watched_instructions;
  /// Require the image to carry the instruction's visual cue.
  bool require_visual = true;
  /// Alignment score of an image against the cue for instruction d.
  std::function<double(const ImageTensor& image, const std::string& d)> visual_probe;
  double visual_threshold = 0.9;
  /// Optional extra requirement on the text that follows the retrieved context.
  std::function<bool(const std::string& system, const std::string& d, const std::string& tail)> command_gate;
  /// A sandwich reminder part makes the planner stay in role.
  bool honor_sandwich = false;
  /// System-prompt keyword -> in-role marker; unmatched prompts use kGenericInRoleMarker.
  std::vector<std::pair<std::string, std::string>> role_markers = {
      {"RecipeMaster", "[RECIPE]"}, {"PoetryGenius", "[POEM]"}};
};

/// Deterministic planner: answers in role unless the retrieved context carries a watched
/// instruction and every configured cue requirement is met.
class ScriptedPlanner final : public ChatBackend {
 public:
  ScriptedPlanner(std::string id, ScriptedPlannerOptions options);
  std::string complete(const std::string& system, std::span<const PromptPart> parts,
                       int max_tokens) const override;

  const ScriptedPlannerOptions& options() const { return options_; }

 private:
  ScriptedPlannerOptions options_;
};

/// Judge mock: reads the <response> block and the "Criterion:" line of the rubric.
/// Injected-task criterion succeeds iff kInjectedTaskMarker appears; in-role criterion
/// succeeds iff an in-role marker appears and the injected marker does not.
class KeywordJudge final : public ChatBackend {
 public:
  explicit KeywordJudge(std::string id,
                        std::vector<std::string> in_role_markers = {"[RECIPE]", "[POEM]", "[IN-ROLE]"});
  std::string complete(const std::string& system, std::span<const PromptPart> parts,
                       int max_tokens) const override;

 private:
  std::vector<std::string> in_role_markers_;
};

/// Meta-constructor mock: turns the "Role description:" and "Defensive rule:" lines of a
/// meta prompt into a fixed defensive system prompt.
class ScriptedConstructor final : public ChatBackend {
 public:
  explicit ScriptedConstructor(std::string id) : ChatBackend(std::move(id), ChatRole::kMetaConstructor) {}
  std::string complete(const std::string& system, std::span<const PromptPart> parts,
                       int max_tokens) const override;
};

}  // namespace crossinject::backends
