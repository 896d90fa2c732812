#include "crossinject/harness.hpp"

#include <json.hpp>

#include <cmath>

#include "crossinject/io.hpp"

namespace crossinject::harness {

namespace {

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace

std::string render_external(const ExternalData& e) { return kRetrievedContextHeader + e.body; }

std::vector<PromptPart> planner_parts(const AgentInputs& inputs) {
  return {PromptPart::image_part(inputs.image), PromptPart::text_part(kExternalLabel, render_external(inputs.external)),
          PromptPart::text_part(kCommandLabel, inputs.command)};
}

void DefenseConfig::check() const {
  if (blur_kernel < 1 || blur_kernel % 2 == 0) throw ConfigError("blur_kernel must be a positive odd integer");
  if (!(effective_sigma() > 0.0)) throw ConfigError("blur_sigma must be > 0");
}

std::string call_log_line(const std::string& trial_id, const PlannerCall& call) {
  nlohmann::ordered_json j;
  j["trial_id"] = trial_id;
  j["backend"] = call.backend_id;
  j["system_sha256"] = sha256_hex(call.system);
  auto parts = nlohmann::ordered_json::array();
  for (const auto& p : call.parts) {
    nlohmann::ordered_json jp;
    jp["label"] = p.label;
    if (p.is_image()) {
      jp["image_sha256"] = image_digest(*p.image);
    } else {
      jp["text"] = p.text;
    }
    parts.push_back(std::move(jp));
  }
  j["parts"] = std::move(parts);
  j["response"] = call.response;
  return j.dump();
}

AgentSpec load_role(const std::filesystem::path& path, const std::string& planner_backend_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("role fixture " + path.string() + " is not valid JSON: " + e.what());
  }
  AgentSpec spec;
  try {
    spec.role_name = j.at("role_name").get<std::string>();
    spec.role_description = j.at("role_description").get<std::string>();
    spec.system_prompt = j.at("system_prompt").get<std::string>();
    if (j.contains("max_new_tokens")) spec.max_new_tokens = j.at("max_new_tokens").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("role fixture " + path.string() + ": " + e.what());
  }
  spec.planner_backend_id = planner_backend_id;
  spec.check();
  return spec;
}

std::string run_agent_parts(const AgentSpec& agent, const backends::ChatBackend& planner,
                            const std::vector<PromptPart>& parts, std::vector<PlannerCall>* log) {
  agent.check();
  if (planner.role() != backends::ChatRole::kPlanner) {
    throw ArgumentError("backend '" + planner.id() + "' is not a planner");
  }
  if (!agent.planner_backend_id.empty() && agent.planner_backend_id != planner.id()) {
    throw ArgumentError("agent expects planner '" + agent.planner_backend_id + "', got '" + planner.id() + "'");
  }
  std::string response = backends::chat_complete(planner, agent.system_prompt, parts, agent.max_new_tokens);
  if (log) log->push_back(PlannerCall{planner.id(), agent.system_prompt, parts, response});
  return response;
}

std::string run_agent(const AgentSpec& agent, const backends::ChatBackend& planner, const AgentInputs& inputs,
                      std::vector<PlannerCall>* log) {
  return run_agent_parts(agent, planner, planner_parts(inputs), log);
}

std::string render_reminder(const std::string& tmpl, const AgentSpec& agent) {
  std::string out = tmpl;
  replace_all(out, "{ROLE_NAME}", agent.role_name);
  replace_all(out, "{ROLE_DESCRIPTION}", agent.role_description);
  return out;
}

std::vector<PromptPart> sandwich_wrap(const std::string& system, const std::string& external_text,
                                      const std::string& command, const std::string& reminder) {
  if (reminder.empty()) throw ArgumentError("sandwich reminder must be non-empty");
  if (external_text.find(reminder) != std::string::npos || command.find(reminder) != std::string::npos) {
    throw ArgumentError("inputs are already sandwich-wrapped");
  }
  return {PromptPart::text_part(kSystemLabel, system), PromptPart::text_part(kExternalLabel, external_text),
          PromptPart::text_part(kCommandLabel, command), PromptPart::text_part(kReminderLabel, reminder)};
}

std::vector<double> gaussian_kernel_1d(int kernel, double sigma) {
  if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("Gaussian kernel size must be a positive odd integer");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ArgumentError("Gaussian sigma must be finite and > 0");
  const int r = kernel / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    w[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

std::vector<double> gaussian_kernel_2d(int kernel, double sigma) {
  const auto g = gaussian_kernel_1d(kernel, sigma);
  std::vector<double> out;
  out.reserve(g.size() * g.size());
  for (double a : g) {
    for (double b : g) out.push_back(a * b);
  }
  return out;
}

ImageTensor gaussian_blur(const ImageTensor& image, int kernel, double sigma) {
  const auto g = gaussian_kernel_1d(kernel, sigma);
  const int r = kernel / 2;
  const int h = image.height();
  const int w = image.width();
  PixelArray tmp(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < kChannels; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += g[static_cast<std::size_t>(k + r)] * image.at(y, reflect(x + k, w), c);
        tmp.at(y, x, c) = acc;
      }
    }
  }
  PixelArray out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < kChannels; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += g[static_cast<std::size_t>(k + r)] * tmp.at(reflect(y + k, h), x, c);
        out.at(y, x, c) = acc;
      }
    }
  }
  return ImageTensor::clamped(std::move(out));
}

std::vector<PromptPart> DefendedInputs::planner_view() const { return parts ? *parts : planner_parts(inputs); }

DefendedInputs apply_defenses(const AgentInputs& inputs, const DefenseConfig& cfg, const AgentSpec& agent,
                              const std::string& reminder) {
  cfg.check();
  DefendedInputs out{inputs, std::nullopt};
  if (cfg.blur) out.inputs.image = gaussian_blur(inputs.image, cfg.blur_kernel, cfg.effective_sigma());
  if (cfg.sandwich) {
    auto wrapped = sandwich_wrap(agent.system_prompt, render_external(out.inputs.external), out.inputs.command,
                                 render_reminder(reminder, agent));
    std::vector<PromptPart> parts = {PromptPart::image_part(out.inputs.image)};
    parts.insert(parts.end(), wrapped.begin(), wrapped.end());
    out.parts = std::move(parts);
  }
  return out;
}

std::string run_defended(const AgentSpec& agent, const backends::ChatBackend& planner, const AgentInputs& inputs,
                         const DefenseConfig& cfg, const std::string& reminder, std::vector<PlannerCall>* log) {
  return run_agent_parts(agent, planner, apply_defenses(inputs, cfg, agent, reminder).planner_view(), log);
}

std::string run_attacked(const AgentSpec& agent, const backends::ChatBackend& planner, const AttackBundle& bundle,
                         const std::string& original_command, const DefenseConfig& defense,
                         const std::string& reminder, std::vector<PlannerCall>* log) {
  if (bundle.manipulated_command().find(original_command) == std::string::npos) {
    throw ArgumentError("manipulated command does not retain the original user command");
  }
  const AgentInputs inputs{bundle.adversarial_image(), bundle.manipulated_external(), bundle.manipulated_command()};
  return run_defended(agent, planner, inputs, defense, reminder, log);
}

}  // namespace crossinject::harness
