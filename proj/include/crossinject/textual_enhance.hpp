#pragma once

// Textual guidance: a defense-aware surrogate system prompt plus a GCG-optimized command
// appended to the user's request.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crossinject/backends/chat.hpp"
#include "crossinject/backends/lm.hpp"
#include "crossinject/core.hpp"

namespace crossinject::textual {

using backends::TokenId;
using backends::Tokens;

inline constexpr const char* kRoleSlot = "{ROLE}";
inline constexpr const char* kRuleSlot = "{RULE}";

struct MetaPromptTemplate {
  std::string template_id;
  std::string body;

  /// Throws TemplateError unless the body holds exactly one role slot and one rule slot.
  void check() const;
};

std::string build_meta_prompt(const std::string& role_description, const std::string& rule,
                              const MetaPromptTemplate& tmpl);

struct DefensiveSystemPrompt {
  std::string role_description;
  std::string rule;
  std::string generated_text;
  std::string constructor_id;
  Provenance provenance;
};

DefensiveSystemPrompt construct_defensive_system_prompt(const std::string& meta_prompt,
                                                        const backends::ChatBackend& constructor,
                                                        std::string role_description = {},
                                                        std::string rule = {});

struct GCGConfig {
  int top_k = 256;
  int batch_size = 512;
  int iterations = 100;
  int command_length = 20;
  bool ascii_only = true;
  std::uint64_t seed = 0;

  void check(int vocab_size) const;
  bool operator==(const GCGConfig&) const = default;
};

/// Context and target of the command objective, tokenized once.
struct CommandObjective {
  Tokens prefix;  // system prompt, "\n", d, "\n"
  Tokens target;  // a*

  static CommandObjective build(const DefensiveSystemPrompt& sys, const MaliciousInstruction& instr,
                                const backends::SurrogateLM& lm);
  Tokens context(const Tokens& command) const;
  /// -log p(a* | prefix + command).
  double loss(const backends::SurrogateLM& lm, const Tokens& command) const;
};

double textual_loss(const Tokens& command, const DefensiveSystemPrompt& sys, const MaliciousInstruction& instr,
                    const backends::SurrogateLM& lm);

struct GCGState {
  Tokens tokens;
  double loss = 0.0;
};

struct Substitution {
  std::size_t position = 0;
  TokenId token = 0;
  bool operator==(const Substitution&) const = default;
};

/// Top-k gradient candidates. When batch_size covers every (position, top-k entry) pair the
/// full set is enumerated position-major with ascending token ids; otherwise batch_size pairs
/// are drawn uniformly with replacement.
std::vector<Substitution> gcg_candidates(const GCGState& state, const GCGConfig& cfg, const CommandObjective& obj,
                                         const backends::SurrogateLM& lm, std::mt19937_64& rng);

/// Best candidate by exact loss (ties: lowest index); the incumbent is kept unless beaten.
GCGState gcg_step(const GCGState& state, const GCGConfig& cfg, const CommandObjective& obj,
                  const backends::SurrogateLM& lm, std::mt19937_64& rng);
GCGState gcg_step(const GCGState& state, const GCGConfig& cfg, const DefensiveSystemPrompt& sys,
                  const MaliciousInstruction& instr, const backends::SurrogateLM& lm, std::mt19937_64& rng);

struct AdversarialCommand {
  Tokens tokens;
  std::string rendered;
  /// Entry 0 is the random initialization, then one entry per iteration.
  std::vector<double> loss_trace;
  double final_loss = 0.0;
};

using LossSink = std::function<void(int iteration, double loss)>;

/// Candidate tokens for initialization and substitution.
std::vector<TokenId> allowed_tokens(const backends::SurrogateLM& lm, bool ascii_only);

AdversarialCommand optimize_command(const GCGConfig& cfg, const DefensiveSystemPrompt& sys,
                                    const MaliciousInstruction& instr, const backends::SurrogateLM& lm,
                                    const LossSink& sink = {});

enum class CommandPlacement { kSuffix, kPrefix };

std::string to_string(CommandPlacement p);
CommandPlacement command_placement_from_string(const std::string& s);

/// C' = C + " " + rendered (suffix) or rendered + " " + C (prefix); an empty C gives rendered.
std::string assemble_user_command(const std::string& user_command, const AdversarialCommand& adv,
                                  CommandPlacement placement = CommandPlacement::kSuffix);

/// Backslash escapes for control characters and \u{XXXX} for non-ASCII code points.
std::string escape_visible(const std::string& text);

/// {"iteration":i,"loss":l}
std::string loss_record_line(int iteration, double loss);

}  // namespace crossinject::textual
