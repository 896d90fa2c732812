#pragma once

// Declarative experiment configuration (JSON). Relative paths resolve against the directory
// of the config file.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crossinject/core.hpp"
#include "crossinject/harness.hpp"
#include "crossinject/payload.hpp"
#include "crossinject/textual_enhance.hpp"
#include "crossinject/visual_align.hpp"

namespace crossinject::config {

/// Shipped fixtures: $CROSSINJECT_FIXTURES if set, else the source tree copy.
std::filesystem::path fixtures_dir();

enum class AlignmentMode { kFull, kNone, kRandomNoise, kAlignWithText };
enum class EnhancementMode { kFull, kNone, kRealSystemPrompt, kRandomString };

std::string to_string(AlignmentMode m);
std::string to_string(EnhancementMode m);
AlignmentMode alignment_mode_from_string(const std::string& s);
EnhancementMode enhancement_mode_from_string(const std::string& s);

/// Attack identifiers accepted by the schema. "jip" and "fb" are reserved for externally
/// computed results and are reported without trials.
const std::vector<std::string>& known_attacks();
bool is_reserved_attack(const std::string& attack);

struct AgentEntry {
  std::string role;
  std::string role_file;
  std::string planner;
  bool operator==(const AgentEntry&) const = default;
};

struct DatasetEntry {
  std::string id;
  std::string path;
  bool operator==(const DatasetEntry&) const = default;
};

struct MaskRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  bool operator==(const MaskRect&) const = default;
};

/// Prompt fixture paths; empty entries fall back to the shipped fixtures.
struct PromptFiles {
  std::string meta_template;
  std::string defensive_rule;
  std::string reminder;
  std::string judge_injected;
  std::string judge_in_role;
  bool operator==(const PromptFiles&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string backend_registry;
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  int repetitions = 3;
  int tasks_per_dataset = 100;
  ImageSize image_size{64, 64};
  std::vector<AgentEntry> agents;
  std::vector<Surface> surfaces;
  std::vector<DatasetEntry> datasets;
  /// Surface name -> host file.
  std::map<std::string, std::string> hosts;
  std::vector<std::string> attacks = {"naive", "crossinject"};
  std::string judge;
  std::string constructor;
  std::string surrogate_lm;
  std::string t2i;
  /// "template" or the id of a meta_constructor backend.
  std::string reformulator = "template";
  std::uint64_t target_seed = 0;
  visual::VisualOptConfig visual;
  /// Round adversarial images to 8 bits before they reach the planner.
  bool quantize_images = false;
  std::optional<MaskRect> mask;
  textual::GCGConfig gcg;
  textual::CommandPlacement command_placement = textual::CommandPlacement::kSuffix;
  payload::WebWrapConfig webwrap;
  payload::Placement document_placement = payload::Placement::kAppend;
  harness::DefenseConfig defense;
  PromptFiles prompts;
  AlignmentMode alignment_mode = AlignmentMode::kFull;
  EnhancementMode enhancement_mode = EnhancementMode::kFull;

  /// Directory relative paths resolve against. Not serialized.
  std::filesystem::path base_dir;

  /// Throws ConfigError on schema violations.
  void check() const;
  std::filesystem::path resolve(const std::string& path) const;
  /// Prompt file or its shipped default (`fixture_name` under prompts/).
  std::filesystem::path prompt_path(const std::string& configured, const std::string& fixture_name) const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Unknown keys anywhere in the document are rejected with ConfigError.
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included, in a fixed key order.
std::string serialize_config(const ExperimentConfig& cfg);
/// SHA-256 of serialize_config.
std::string config_digest(const ExperimentConfig& cfg);

}  // namespace crossinject::config
