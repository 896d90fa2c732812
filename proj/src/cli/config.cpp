#include "crossinject/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <set>

#include "crossinject/io.hpp"

#ifndef CROSSINJECT_FIXTURES_DIR
#define CROSSINJECT_FIXTURES_DIR "fixtures/v1"
#endif

namespace crossinject::config {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void parse_visual(const json& j, ExperimentConfig& cfg) {
  const std::string where = "visual";
  expect_keys(j, {"budget", "iterations", "step_size", "encoders", "ssa_samples", "ssa_rho", "ssa_sigma",
                  "momentum", "inner_step", "norm", "mask", "target_seed", "quantize"},
              where);
  auto& v = cfg.visual;
  int budget = v.budget.epsilon_8bit();
  read(j, "budget", budget, where);
  try {
    v.budget = PixelBudget(budget);
  } catch (const Error& e) {
    throw ConfigError(std::string("visual.budget: ") + e.what());
  }
  read(j, "iterations", v.iterations, where);
  read(j, "step_size", v.step_size, where);
  read(j, "encoders", v.encoder_ids, where);
  read(j, "ssa_samples", v.ssa_samples, where);
  read(j, "ssa_rho", v.ssa_rho, where);
  read(j, "ssa_sigma", v.ssa_sigma, where);
  read(j, "momentum", v.momentum, where);
  read(j, "inner_step", v.inner_step, where);
  if (j.contains("norm")) {
    std::string norm;
    read(j, "norm", norm, where);
    v.norm = visual::feature_norm_from_string(norm);
  }
  read(j, "target_seed", cfg.target_seed, where);
  read(j, "quantize", cfg.quantize_images, where);
  if (j.contains("mask") && !j.at("mask").is_null()) {
    const auto& m = j.at("mask");
    expect_keys(m, {"top", "left", "height", "width"}, "visual.mask");
    MaskRect r;
    read(m, "top", r.top, "visual.mask");
    read(m, "left", r.left, "visual.mask");
    read(m, "height", r.height, "visual.mask");
    read(m, "width", r.width, "visual.mask");
    cfg.mask = r;
  }
}

void parse_gcg(const json& j, ExperimentConfig& cfg) {
  const std::string where = "gcg";
  expect_keys(j, {"top_k", "batch_size", "iterations", "command_length", "ascii_only", "placement"}, where);
  read(j, "top_k", cfg.gcg.top_k, where);
  read(j, "batch_size", cfg.gcg.batch_size, where);
  read(j, "iterations", cfg.gcg.iterations, where);
  read(j, "command_length", cfg.gcg.command_length, where);
  read(j, "ascii_only", cfg.gcg.ascii_only, where);
  if (j.contains("placement")) {
    std::string p;
    read(j, "placement", p, where);
    cfg.command_placement = textual::command_placement_from_string(p);
  }
}

void parse_webwrap(const json& j, ExperimentConfig& cfg) {
  const std::string where = "webwrap";
  expect_keys(j, {"tag_sequence", "whitespace_disruptors", "placement", "seed"}, where);
  read(j, "tag_sequence", cfg.webwrap.tag_sequence, where);
  read(j, "whitespace_disruptors", cfg.webwrap.whitespace_disruptors, where);
  read(j, "seed", cfg.webwrap.seed, where);
  if (j.contains("placement")) {
    std::string p;
    read(j, "placement", p, where);
    cfg.webwrap.placement = payload::placement_from_string(p);
  }
}

void parse_defense(const json& j, ExperimentConfig& cfg) {
  const std::string where = "defense";
  expect_keys(j, {"sandwich", "blur", "blur_kernel", "blur_sigma"}, where);
  read(j, "sandwich", cfg.defense.sandwich, where);
  read(j, "blur", cfg.defense.blur, where);
  read(j, "blur_kernel", cfg.defense.blur_kernel, where);
  if (j.contains("blur_sigma") && !j.at("blur_sigma").is_null()) {
    double s = 0.0;
    read(j, "blur_sigma", s, where);
    cfg.defense.blur_sigma = s;
  }
}

}  // namespace

std::filesystem::path fixtures_dir() {
  if (const char* env = std::getenv("CROSSINJECT_FIXTURES"); env && *env) return env;
  return CROSSINJECT_FIXTURES_DIR;
}

std::string to_string(AlignmentMode m) {
  switch (m) {
    case AlignmentMode::kFull: return "full";
    case AlignmentMode::kNone: return "none";
    case AlignmentMode::kRandomNoise: return "random_noise";
    case AlignmentMode::kAlignWithText: return "align_with_text";
  }
  return "full";
}

std::string to_string(EnhancementMode m) {
  switch (m) {
    case EnhancementMode::kFull: return "full";
    case EnhancementMode::kNone: return "none";
    case EnhancementMode::kRealSystemPrompt: return "real_system_prompt";
    case EnhancementMode::kRandomString: return "random_string";
  }
  return "full";
}

AlignmentMode alignment_mode_from_string(const std::string& s) {
  for (auto m : {AlignmentMode::kFull, AlignmentMode::kNone, AlignmentMode::kRandomNoise, AlignmentMode::kAlignWithText}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown alignment_mode '" + s + "'");
}

EnhancementMode enhancement_mode_from_string(const std::string& s) {
  for (auto m : {EnhancementMode::kFull, EnhancementMode::kNone, EnhancementMode::kRealSystemPrompt,
                 EnhancementMode::kRandomString}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown enhancement_mode '" + s + "'");
}

const std::vector<std::string>& known_attacks() {
  static const std::vector<std::string> attacks = {"naive", "crossinject", "jip", "fb"};
  return attacks;
}

bool is_reserved_attack(const std::string& attack) { return attack == "jip" || attack == "fb"; }

void ExperimentConfig::check() const {
  if (name.empty()) throw ConfigError("name must be non-empty");
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (tasks_per_dataset < 1) throw ConfigError("tasks_per_dataset must be >= 1");
  if (image_size.height < 1 || image_size.width < 1) throw ConfigError("image_size must be positive");
  if (agents.empty()) throw ConfigError("at least one agent is required");
  for (const auto& a : agents) {
    if (a.role.empty() || a.role_file.empty() || a.planner.empty()) {
      throw ConfigError("agents need role, role_file and planner");
    }
  }
  if (surfaces.empty()) throw ConfigError("at least one surface is required");
  for (auto s : surfaces) {
    if (!hosts.count(to_string(s))) throw ConfigError("no host file configured for surface '" + to_string(s) + "'");
  }
  for (const auto& [k, _] : hosts) surface_from_string(k);
  if (datasets.empty()) throw ConfigError("at least one dataset is required");
  std::set<std::string> ids;
  for (const auto& d : datasets) {
    if (d.id.empty() || d.path.empty()) throw ConfigError("datasets need id and path");
    if (!ids.insert(d.id).second) throw ConfigError("duplicate dataset id '" + d.id + "'");
  }
  if (attacks.empty()) throw ConfigError("at least one attack mode is required");
  for (const auto& a : attacks) {
    const auto& known = known_attacks();
    if (std::find(known.begin(), known.end(), a) == known.end()) throw ConfigError("unknown attack '" + a + "'");
  }
  if (judge.empty()) throw ConfigError("judge backend id is required");
  if (constructor.empty()) throw ConfigError("constructor backend id is required");
  if (surrogate_lm.empty()) throw ConfigError("surrogate_lm backend id is required");
  if (t2i.empty()) throw ConfigError("t2i backend id is required");
  if (visual.encoder_ids.empty()) throw ConfigError("visual.encoders must list at least one encoder");
  if (reformulator.empty()) throw ConfigError("reformulator must be 'template' or a backend id");
  visual.check();
  if (mask) {
    if (mask->top < 0 || mask->left < 0 || mask->height < 1 || mask->width < 1 ||
        mask->top + mask->height > image_size.height || mask->left + mask->width > image_size.width) {
      throw ConfigError("visual.mask must lie inside the image");
    }
  }
  if (gcg.top_k < 1 || gcg.batch_size < 1 || gcg.iterations < 0 || gcg.command_length < 1) {
    throw ConfigError("gcg settings out of range");
  }
  webwrap.check();
  defense.check();
}

std::filesystem::path ExperimentConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

std::filesystem::path ExperimentConfig::prompt_path(const std::string& configured,
                                                    const std::string& fixture_name) const {
  if (configured.empty()) return fixtures_dir() / "prompts" / fixture_name;
  return resolve(configured);
}

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  const std::string where = "config";
  expect_keys(j, {"name", "backend_registry", "output_dir", "seed", "repetitions", "tasks_per_dataset", "image_size",
                  "agents", "surfaces", "datasets", "hosts", "attacks", "judge", "constructor", "surrogate_lm", "t2i",
                  "reformulator", "visual", "gcg", "webwrap", "document_placement", "defense", "prompts",
                  "alignment_mode", "enhancement_mode"},
              where);
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  read(j, "name", cfg.name, where);
  read(j, "backend_registry", cfg.backend_registry, where);
  read(j, "output_dir", cfg.output_dir, where);
  read(j, "seed", cfg.seed, where);
  read(j, "repetitions", cfg.repetitions, where);
  read(j, "tasks_per_dataset", cfg.tasks_per_dataset, where);
  if (j.contains("image_size")) {
    const auto& s = j.at("image_size");
    if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer()) {
      throw ConfigError("image_size must be [height, width]");
    }
    cfg.image_size = ImageSize{s[0].get<int>(), s[1].get<int>()};
  }
  if (j.contains("agents")) {
    if (!j.at("agents").is_array()) throw ConfigError("agents must be an array");
    for (const auto& a : j.at("agents")) {
      expect_keys(a, {"role", "role_file", "planner"}, "agents[]");
      AgentEntry e;
      read(a, "role", e.role, "agents[]");
      read(a, "role_file", e.role_file, "agents[]");
      read(a, "planner", e.planner, "agents[]");
      cfg.agents.push_back(std::move(e));
    }
  }
  if (j.contains("surfaces")) {
    std::vector<std::string> names;
    read(j, "surfaces", names, where);
    for (const auto& n : names) {
      try {
        cfg.surfaces.push_back(surface_from_string(n));
      } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (j.contains("datasets")) {
    if (!j.at("datasets").is_array()) throw ConfigError("datasets must be an array");
    for (const auto& d : j.at("datasets")) {
      expect_keys(d, {"id", "path"}, "datasets[]");
      DatasetEntry e;
      read(d, "id", e.id, "datasets[]");
      read(d, "path", e.path, "datasets[]");
      cfg.datasets.push_back(std::move(e));
    }
  }
  read(j, "hosts", cfg.hosts, where);
  read(j, "attacks", cfg.attacks, where);
  read(j, "judge", cfg.judge, where);
  read(j, "constructor", cfg.constructor, where);
  read(j, "surrogate_lm", cfg.surrogate_lm, where);
  read(j, "t2i", cfg.t2i, where);
  read(j, "reformulator", cfg.reformulator, where);
  if (j.contains("visual")) parse_visual(j.at("visual"), cfg);
  if (j.contains("gcg")) parse_gcg(j.at("gcg"), cfg);
  if (j.contains("webwrap")) parse_webwrap(j.at("webwrap"), cfg);
  if (j.contains("document_placement")) {
    std::string p;
    read(j, "document_placement", p, where);
    cfg.document_placement = payload::placement_from_string(p);
  }
  if (j.contains("defense")) parse_defense(j.at("defense"), cfg);
  if (j.contains("prompts")) {
    const auto& p = j.at("prompts");
    expect_keys(p, {"meta_template", "defensive_rule", "reminder", "judge_injected", "judge_in_role"}, "prompts");
    read(p, "meta_template", cfg.prompts.meta_template, "prompts");
    read(p, "defensive_rule", cfg.prompts.defensive_rule, "prompts");
    read(p, "reminder", cfg.prompts.reminder, "prompts");
    read(p, "judge_injected", cfg.prompts.judge_injected, "prompts");
    read(p, "judge_in_role", cfg.prompts.judge_in_role, "prompts");
  }
  if (j.contains("alignment_mode")) {
    std::string m;
    read(j, "alignment_mode", m, where);
    cfg.alignment_mode = alignment_mode_from_string(m);
  }
  if (j.contains("enhancement_mode")) {
    std::string m;
    read(j, "enhancement_mode", m, where);
    cfg.enhancement_mode = enhancement_mode_from_string(m);
  }
  cfg.check();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, path.parent_path());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  ordered_json j;
  j["name"] = cfg.name;
  j["backend_registry"] = cfg.backend_registry;
  j["output_dir"] = cfg.output_dir;
  j["seed"] = cfg.seed;
  j["repetitions"] = cfg.repetitions;
  j["tasks_per_dataset"] = cfg.tasks_per_dataset;
  j["image_size"] = {cfg.image_size.height, cfg.image_size.width};
  j["agents"] = ordered_json::array();
  for (const auto& a : cfg.agents) {
    j["agents"].push_back(ordered_json{{"role", a.role}, {"role_file", a.role_file}, {"planner", a.planner}});
  }
  j["surfaces"] = ordered_json::array();
  for (auto s : cfg.surfaces) j["surfaces"].push_back(to_string(s));
  j["datasets"] = ordered_json::array();
  for (const auto& d : cfg.datasets) j["datasets"].push_back(ordered_json{{"id", d.id}, {"path", d.path}});
  j["hosts"] = ordered_json::object();
  for (const auto& [k, v] : cfg.hosts) j["hosts"][k] = v;
  j["attacks"] = cfg.attacks;
  j["judge"] = cfg.judge;
  j["constructor"] = cfg.constructor;
  j["surrogate_lm"] = cfg.surrogate_lm;
  j["t2i"] = cfg.t2i;
  j["reformulator"] = cfg.reformulator;

  ordered_json v;
  v["budget"] = cfg.visual.budget.epsilon_8bit();
  v["iterations"] = cfg.visual.iterations;
  v["step_size"] = cfg.visual.step_size;
  v["encoders"] = cfg.visual.encoder_ids;
  v["ssa_samples"] = cfg.visual.ssa_samples;
  v["ssa_rho"] = cfg.visual.ssa_rho;
  v["ssa_sigma"] = cfg.visual.ssa_sigma;
  v["momentum"] = cfg.visual.momentum;
  v["inner_step"] = cfg.visual.inner_step;
  v["norm"] = visual::to_string(cfg.visual.norm);
  if (cfg.mask) {
    v["mask"] = ordered_json{{"top", cfg.mask->top}, {"left", cfg.mask->left}, {"height", cfg.mask->height},
                             {"width", cfg.mask->width}};
  } else {
    v["mask"] = nullptr;
  }
  v["target_seed"] = cfg.target_seed;
  v["quantize"] = cfg.quantize_images;
  j["visual"] = std::move(v);

  j["gcg"] = ordered_json{{"top_k", cfg.gcg.top_k},
                          {"batch_size", cfg.gcg.batch_size},
                          {"iterations", cfg.gcg.iterations},
                          {"command_length", cfg.gcg.command_length},
                          {"ascii_only", cfg.gcg.ascii_only},
                          {"placement", textual::to_string(cfg.command_placement)}};
  j["webwrap"] = ordered_json{{"tag_sequence", cfg.webwrap.tag_sequence},
                              {"whitespace_disruptors", cfg.webwrap.whitespace_disruptors},
                              {"placement", payload::to_string(cfg.webwrap.placement)},
                              {"seed", cfg.webwrap.seed}};
  j["document_placement"] = payload::to_string(cfg.document_placement);
  ordered_json d;
  d["sandwich"] = cfg.defense.sandwich;
  d["blur"] = cfg.defense.blur;
  d["blur_kernel"] = cfg.defense.blur_kernel;
  if (cfg.defense.blur_sigma) {
    d["blur_sigma"] = *cfg.defense.blur_sigma;
  } else {
    d["blur_sigma"] = nullptr;
  }
  j["defense"] = std::move(d);
  j["prompts"] = ordered_json{{"meta_template", cfg.prompts.meta_template},
                              {"defensive_rule", cfg.prompts.defensive_rule},
                              {"reminder", cfg.prompts.reminder},
                              {"judge_injected", cfg.prompts.judge_injected},
                              {"judge_in_role", cfg.prompts.judge_in_role}};
  j["alignment_mode"] = to_string(cfg.alignment_mode);
  j["enhancement_mode"] = to_string(cfg.enhancement_mode);
  return j.dump(2) + "\n";
}

std::string config_digest(const ExperimentConfig& cfg) { return sha256_hex(serialize_config(cfg)); }

}  // namespace crossinject::config
