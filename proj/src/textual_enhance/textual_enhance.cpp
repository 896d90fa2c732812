#include "crossinject/textual_enhance.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>

#include "crossinject/io.hpp"

namespace crossinject::textual {

namespace {

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

std::uint32_t decode_codepoint(const std::string& cp) {
  const auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(cp[i])); };
  switch (cp.size()) {
    case 1: return b(0);
    case 2: return ((b(0) & 0x1F) << 6) | (b(1) & 0x3F);
    case 3: return ((b(0) & 0x0F) << 12) | ((b(1) & 0x3F) << 6) | (b(2) & 0x3F);
    default: return ((b(0) & 0x07) << 18) | ((b(1) & 0x3F) << 12) | ((b(2) & 0x3F) << 6) | (b(3) & 0x3F);
  }
}

}  // namespace

void MetaPromptTemplate::check() const {
  const auto roles = count_occurrences(body, kRoleSlot);
  const auto rules = count_occurrences(body, kRuleSlot);
  if (roles != 1 || rules != 1) {
    throw TemplateError("meta prompt template '" + template_id + "' must contain exactly one " + kRoleSlot +
                        " and one " + kRuleSlot + " slot (found " + std::to_string(roles) + " and " +
                        std::to_string(rules) + ")");
  }
}

std::string build_meta_prompt(const std::string& role_description, const std::string& rule,
                              const MetaPromptTemplate& tmpl) {
  if (role_description.empty()) throw ArgumentError("role description must be non-empty");
  if (rule.empty()) throw ArgumentError("defensive rule must be non-empty");
  tmpl.check();
  // Later slot first.
  std::string out = tmpl.body;
  const auto role_pos = out.find(kRoleSlot);
  const auto rule_pos = out.find(kRuleSlot);
  const std::size_t role_len = std::string(kRoleSlot).size();
  const std::size_t rule_len = std::string(kRuleSlot).size();
  if (rule_pos > role_pos) {
    out.replace(rule_pos, rule_len, rule);
    out.replace(role_pos, role_len, role_description);
  } else {
    out.replace(role_pos, role_len, role_description);
    out.replace(rule_pos, rule_len, rule);
  }
  return out;
}

DefensiveSystemPrompt construct_defensive_system_prompt(const std::string& meta_prompt,
                                                        const backends::ChatBackend& constructor,
                                                        std::string role_description, std::string rule) {
  if (constructor.role() != backends::ChatRole::kMetaConstructor) {
    throw ArgumentError("backend '" + constructor.id() + "' is not a meta_constructor");
  }
  if (meta_prompt.empty()) throw ArgumentError("meta prompt must be non-empty");
  const std::vector<backends::PromptPart> parts = {backends::PromptPart::text_part("meta_prompt", meta_prompt)};
  std::string text = backends::chat_complete(constructor, "", parts, 1024);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw EmptyGenerationError("constructor '" + constructor.id() + "' returned an empty system prompt");
  }
  if (text.find(kRoleSlot) != std::string::npos || text.find(kRuleSlot) != std::string::npos) {
    throw EmptyGenerationError("constructor '" + constructor.id() + "' left a template slot unresolved");
  }
  DefensiveSystemPrompt out;
  out.role_description = std::move(role_description);
  out.rule = std::move(rule);
  out.generated_text = std::move(text);
  out.constructor_id = constructor.id();
  out.provenance["constructor_id"] = constructor.id();
  out.provenance["meta_prompt_sha256"] = sha256_hex(meta_prompt);
  return out;
}

void GCGConfig::check(int vocab_size) const {
  if (top_k < 1) throw ConfigError("gcg top_k must be >= 1");
  if (top_k > vocab_size) {
    throw ConfigError("gcg top_k " + std::to_string(top_k) + " exceeds the vocabulary size " +
                      std::to_string(vocab_size));
  }
  if (batch_size < 1) throw ConfigError("gcg batch_size must be >= 1");
  if (iterations < 0) throw ConfigError("gcg iterations must be >= 0");
  if (command_length < 1) throw ConfigError("gcg command_length must be >= 1");
}

CommandObjective CommandObjective::build(const DefensiveSystemPrompt& sys, const MaliciousInstruction& instr,
                                         const backends::SurrogateLM& lm) {
  instr.check();
  const auto& tok = lm.tokenizer();
  CommandObjective obj;
  obj.prefix = tok.tokenize_lenient(sys.generated_text + "\n" + instr.d + "\n");
  obj.target = tok.tokenize_lenient(instr.target_action);
  return obj;
}

Tokens CommandObjective::context(const Tokens& command) const {
  Tokens ctx = prefix;
  ctx.insert(ctx.end(), command.begin(), command.end());
  return ctx;
}

double CommandObjective::loss(const backends::SurrogateLM& lm, const Tokens& command) const {
  return -backends::lm_logprob(lm, context(command), target);
}

double textual_loss(const Tokens& command, const DefensiveSystemPrompt& sys, const MaliciousInstruction& instr,
                    const backends::SurrogateLM& lm) {
  return CommandObjective::build(sys, instr, lm).loss(lm, command);
}

std::vector<TokenId> allowed_tokens(const backends::SurrogateLM& lm, bool ascii_only) {
  std::vector<TokenId> out;
  for (TokenId t = 0; t < lm.vocab_size(); ++t) {
    if (!ascii_only || lm.tokenizer().is_printable_ascii(t)) out.push_back(t);
  }
  if (out.empty()) throw ConfigError("surrogate vocabulary has no admissible command tokens");
  return out;
}

std::vector<Substitution> gcg_candidates(const GCGState& state, const GCGConfig& cfg, const CommandObjective& obj,
                                         const backends::SurrogateLM& lm, std::mt19937_64& rng) {
  cfg.check(lm.vocab_size());
  if (state.tokens.empty()) throw ArgumentError("command must hold at least one token");
  if (!lm.supports_gradient()) throw CapabilityError("surrogate LM '" + lm.id() + "' does not provide gradients");
  const auto grad = backends::lm_onehot_gradient(lm, obj.context(state.tokens), obj.prefix.size(),
                                                 state.tokens.size(), obj.target);
  const auto allowed = allowed_tokens(lm, cfg.ascii_only);

  std::vector<std::vector<TokenId>> top(state.tokens.size());
  std::size_t total = 0;
  for (std::size_t p = 0; p < state.tokens.size(); ++p) {
    auto ranked = allowed;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [&](TokenId a, TokenId b) { return grad(p, static_cast<std::size_t>(a)) < grad(p, static_cast<std::size_t>(b)); });
    ranked.resize(std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(cfg.top_k)));
    std::sort(ranked.begin(), ranked.end());
    total += ranked.size();
    top[p] = std::move(ranked);
  }

  std::vector<Substitution> out;
  if (static_cast<std::size_t>(cfg.batch_size) >= total) {
    out.reserve(total);
    for (std::size_t p = 0; p < top.size(); ++p) {
      for (TokenId t : top[p]) out.push_back({p, t});
    }
    return out;
  }
  out.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) {
    const std::size_t p = rng() % top.size();
    const TokenId t = top[p][rng() % top[p].size()];
    out.push_back({p, t});
  }
  return out;
}

GCGState gcg_step(const GCGState& state, const GCGConfig& cfg, const CommandObjective& obj,
                  const backends::SurrogateLM& lm, std::mt19937_64& rng) {
  const auto candidates = gcg_candidates(state, cfg, obj, lm, rng);
  GCGState best = state;
  Tokens trial = state.tokens;
  for (const auto& c : candidates) {
    const TokenId saved = trial[c.position];
    trial[c.position] = c.token;
    const double loss = obj.loss(lm, trial);
    if (loss < best.loss) {
      best.loss = loss;
      best.tokens = trial;
    }
    trial[c.position] = saved;
  }
  return best;
}

GCGState gcg_step(const GCGState& state, const GCGConfig& cfg, const DefensiveSystemPrompt& sys,
                  const MaliciousInstruction& instr, const backends::SurrogateLM& lm, std::mt19937_64& rng) {
  return gcg_step(state, cfg, CommandObjective::build(sys, instr, lm), lm, rng);
}

AdversarialCommand optimize_command(const GCGConfig& cfg, const DefensiveSystemPrompt& sys,
                                    const MaliciousInstruction& instr, const backends::SurrogateLM& lm,
                                    const LossSink& sink) {
  cfg.check(lm.vocab_size());
  if (cfg.iterations > 0 && !lm.supports_gradient()) {
    throw CapabilityError("surrogate LM '" + lm.id() + "' does not provide gradients");
  }
  const auto obj = CommandObjective::build(sys, instr, lm);
  const auto allowed = allowed_tokens(lm, cfg.ascii_only);
  std::mt19937_64 rng(cfg.seed);

  GCGState state;
  state.tokens.resize(static_cast<std::size_t>(cfg.command_length));
  for (auto& t : state.tokens) t = allowed[rng() % allowed.size()];
  state.loss = obj.loss(lm, state.tokens);

  AdversarialCommand out;
  out.loss_trace.push_back(state.loss);
  if (sink) sink(0, state.loss);
  for (int it = 1; it <= cfg.iterations; ++it) {
    state = gcg_step(state, cfg, obj, lm, rng);
    out.loss_trace.push_back(state.loss);
    if (sink) sink(it, state.loss);
  }
  out.tokens = std::move(state.tokens);
  out.rendered = lm.tokenizer().detokenize(out.tokens);
  out.final_loss = state.loss;
  return out;
}

std::string to_string(CommandPlacement p) { return p == CommandPlacement::kSuffix ? "suffix" : "prefix"; }

CommandPlacement command_placement_from_string(const std::string& s) {
  if (s == "suffix") return CommandPlacement::kSuffix;
  if (s == "prefix") return CommandPlacement::kPrefix;
  throw ConfigError("unknown command placement '" + s + "' (expected suffix or prefix)");
}

std::string assemble_user_command(const std::string& user_command, const AdversarialCommand& adv,
                                  CommandPlacement placement) {
  if (adv.rendered.empty()) throw ArgumentError("adversarial command must be non-empty");
  if (user_command.empty()) return adv.rendered;
  return placement == CommandPlacement::kSuffix ? user_command + " " + adv.rendered
                                                : adv.rendered + " " + user_command;
}

std::string escape_visible(const std::string& text) {
  std::string out;
  for (const auto& cp : backends::utf8_codepoints(text)) {
    const auto code = decode_codepoint(cp);
    switch (code) {
      case '\n': out += "\\n"; continue;
      case '\t': out += "\\t"; continue;
      case '\r': out += "\\r"; continue;
      case '\\': out += "\\\\"; continue;
      default: break;
    }
    if (code >= 0x20 && code < 0x7F) {
      out += cp;
    } else {
      char buf[16];
      std::snprintf(buf, sizeof buf, "\\u{%04X}", code);
      out += buf;
    }
  }
  return out;
}

std::string loss_record_line(int iteration, double loss) {
  nlohmann::ordered_json j;
  j["iteration"] = iteration;
  j["loss"] = loss;
  return j.dump();
}

}  // namespace crossinject::textual
