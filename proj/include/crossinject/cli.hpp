#pragma once

// Subcommand implementations behind the crossinject executable.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crossinject/config.hpp"

namespace crossinject::cli {

enum ExitCode : int {
  kOk = 0,
  kPartialFailure = 1,
  kConfigError = 2,
  kStageFailure = 3,
};

inline constexpr const char* kOutDirEnv = "CROSSINJECT_OUT_DIR";
inline constexpr const char* kRegistryEnv = "CROSSINJECT_BACKEND_REGISTRY";

struct GlobalOptions {
  /// Defaults to the shipped configs/default.json.
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> backend_registry;
  bool dry_run = false;
};

struct CommandResult {
  int exit_code = kOk;
  std::optional<std::filesystem::path> run_dir;
};

/// Config with --seed applied.
config::ExperimentConfig resolve_config(const GlobalOptions& opts);
/// --out, then $CROSSINJECT_OUT_DIR, then the config's output_dir.
std::filesystem::path resolve_out_dir(const GlobalOptions& opts, const config::ExperimentConfig& cfg);
/// --backend-registry, then $CROSSINJECT_BACKEND_REGISTRY, then the config's registry.
std::optional<std::filesystem::path> resolve_registry_path(const GlobalOptions& opts);
/// <out>/<YYYYmmdd-HHMMSS>-<digest prefix>, suffixed when the name is taken. Created on return.
std::filesystem::path make_run_dir(const std::filesystem::path& out_dir, const config::ExperimentConfig& cfg);

struct CraftVisualArgs {
  std::string instruction;
  std::filesystem::path image;
  /// Use this image as I_t instead of generating one.
  std::optional<std::filesystem::path> target_image;
};

struct CraftCommandArgs {
  std::string role_description;
  std::string instruction;
  /// a*; defaults to the compliance prefix of `instruction`.
  std::optional<std::string> target_action;
};

enum class AblationAxis { kBudget, kVisualIters, kGcgIters, kSurrogate, kAlignmentMode, kEnhancementMode };

std::string to_string(AblationAxis axis);
/// Throws ConfigError for unknown names.
AblationAxis ablation_axis_from_string(const std::string& s);
/// Default sweep values rendered as strings.
std::vector<std::string> ablation_grid(AblationAxis axis, const std::vector<std::string>& lm_ids);
/// Returns a copy of cfg with the axis set to `value`.
config::ExperimentConfig apply_axis(config::ExperimentConfig cfg, AblationAxis axis, const std::string& value);

CommandResult cmd_craft_visual(const GlobalOptions& opts, const CraftVisualArgs& args, std::ostream& out,
                               std::ostream& err);
CommandResult cmd_craft_command(const GlobalOptions& opts, const CraftCommandArgs& args, std::ostream& out,
                                std::ostream& err);
CommandResult cmd_run(const GlobalOptions& opts, std::ostream& out, std::ostream& err);
CommandResult cmd_ablate(const GlobalOptions& opts, const std::string& axis, std::ostream& out, std::ostream& err);
CommandResult cmd_defend(const GlobalOptions& opts, std::ostream& out, std::ostream& err);
/// Re-renders report.json from a run directory (or a report file) as the text table.
CommandResult cmd_report(const std::filesystem::path& path, std::ostream& out, std::ostream& err);

}  // namespace crossinject::cli
