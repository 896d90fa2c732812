#include <CLI11.hpp>

#include <iostream>

#include "crossinject/cli.hpp"

int main(int argc, char** argv) {
  using namespace crossinject::cli;

  CLI::App app{"Cross-modal prompt injection experiments against multimodal agents"};
  app.require_subcommand(1);

  GlobalOptions opts;
  std::string config, out, registry;
  std::uint64_t seed = 0;
  auto* config_opt = app.add_option("--config", config, "Experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the base seed");
  auto* out_opt = app.add_option("--out", out, "Output directory");
  auto* registry_opt = app.add_option("--backend-registry", registry, "Backend registry (JSON)");
  app.add_flag("--dry-run", opts.dry_run, "Validate and print the plan without running");

  CraftVisualArgs visual_args;
  std::string target_image;
  auto* craft_visual = app.add_subcommand("craft-visual", "Optimize an adversarial image");
  craft_visual->add_option("--instruction", visual_args.instruction, "Injected instruction")->required();
  craft_visual->add_option("--image", visual_args.image, "Benign input image (.png or .ppm)")->required();
  auto* target_opt = craft_visual->add_option("--target-image", target_image, "Use this image as the target");

  CraftCommandArgs command_args;
  auto* craft_command = app.add_subcommand("craft-command", "Optimize an adversarial command suffix");
  craft_command->add_option("--role-description", command_args.role_description, "Agent role description")
      ->required();
  craft_command->add_option("--instruction", command_args.instruction, "Injected instruction")->required();
  std::string target_action;
  auto* target_action_opt =
      craft_command->add_option("--target-action", target_action, "Target continuation (default: compliance prefix)");

  auto* run = app.add_subcommand("run", "Run the configured experiment grid");

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "Sweep one ablation axis");
  ablate->add_option("--axis", axis,
                     "budget | visual_iters | gcg_iters | surrogate | alignment_mode | enhancement_mode")
      ->required();

  auto* defend = app.add_subcommand("defend", "Evaluate the sandwich and blur defenses");

  std::string report_path;
  auto* report = app.add_subcommand("report", "Render a saved report as a table");
  report->add_option("path", report_path, "Run directory or report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (*config_opt) opts.config = config;
  if (*seed_opt) opts.seed = seed;
  if (*out_opt) opts.out = out;
  if (*registry_opt) opts.backend_registry = registry;
  if (*target_opt) visual_args.target_image = target_image;
  if (*target_action_opt) command_args.target_action = target_action;

  CommandResult result;
  if (*craft_visual) {
    result = cmd_craft_visual(opts, visual_args, std::cout, std::cerr);
  } else if (*craft_command) {
    result = cmd_craft_command(opts, command_args, std::cout, std::cerr);
  } else if (*run) {
    result = cmd_run(opts, std::cout, std::cerr);
  } else if (*ablate) {
    result = cmd_ablate(opts, axis, std::cout, std::cerr);
  } else if (*defend) {
    result = cmd_defend(opts, std::cout, std::cerr);
  } else if (*report) {
    result = cmd_report(report_path, std::cout, std::cerr);
  }
  return result.exit_code;
}
