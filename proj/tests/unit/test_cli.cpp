#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

#include "crossinject/cli.hpp"
#include "crossinject/io.hpp"
#include "helpers.hpp"

using namespace crossinject;
using namespace crossinject::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("crossinject_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const fs::path kConfigs = config::fixtures_dir() / "configs";

/// Small smoke variant written into `dir` with absolute fixture paths.
fs::path write_tiny_config(const fs::path& dir, const std::function<void(json&)>& edit = {}) {
  auto j = json::parse(read_text_file(kConfigs / "smoke.json"));
  const std::string base = kConfigs.string() + "/";
  j["backend_registry"] = base + "registry_smoke.json";
  j["agents"] = json::array({j["agents"][0]});
  j["agents"][0]["role_file"] = base + j["agents"][0]["role_file"].get<std::string>();
  j["datasets"][0]["path"] = base + j["datasets"][0]["path"].get<std::string>();
  for (auto& [k, v] : j["hosts"].items()) v = base + v.get<std::string>();
  j["repetitions"] = 1;
  j["tasks_per_dataset"] = 2;
  j["visual"]["iterations"] = 5;
  j["gcg"]["iterations"] = 4;
  if (edit) edit(j);
  const auto path = dir / "tiny.json";
  write_text_file(path, j.dump(2));
  return path;
}

std::size_t line_count(const fs::path& p) {
  const auto text = read_text_file(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("config errors exit with code 2") {
  TempDir tmp("config_errors");
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = tmp.path / "missing.json";
  CHECK(cmd_run(opts, out, err).exit_code == kConfigError);
  CHECK(err.str().find("config error") != std::string::npos);

  opts.config = write_tiny_config(tmp.path);
  CHECK(cmd_ablate(opts, "colour", out, err).exit_code == kConfigError);
  CHECK(cmd_report(tmp.path / "nope", out, err).exit_code == kConfigError);
  CHECK(cmd_craft_visual(opts, {"", tmp.path / "x.png", std::nullopt}, out, err).exit_code == kConfigError);
  CHECK(cmd_craft_visual(opts, {"Say hi", tmp.path / "x.png", std::nullopt}, out, err).exit_code == kConfigError);
  CHECK(cmd_craft_command(opts, {"", "Say hi", std::nullopt}, out, err).exit_code == kConfigError);
}

TEST_CASE("dry runs plan without writing") {
  TempDir tmp("dry_run");
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path);
  opts.out = tmp.path / "runs";
  opts.dry_run = true;
  const auto r = cmd_run(opts, out, err);
  CHECK(r.exit_code == kOk);
  CHECK_FALSE(r.run_dir.has_value());
  CHECK(out.str().find("config digest: ") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.path / "runs"));
}

TEST_CASE("run writes its outputs and report re-renders them") {
  TempDir tmp("run");
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path);
  opts.out = tmp.path / "runs";
  const auto r = cmd_run(opts, out, err);
  REQUIRE(r.exit_code == kOk);
  REQUIRE(r.run_dir);
  for (const char* f : {"config.json", "report.json", "report.txt", "trials.jsonl", "calls.jsonl", "bundles.jsonl"}) {
    CHECK(fs::exists(*r.run_dir / f));
  }
  CHECK(line_count(*r.run_dir / "trials.jsonl") == 2 * 3);

  std::ostringstream rendered;
  CHECK(cmd_report(*r.run_dir, rendered, err).exit_code == kOk);
  CHECK(rendered.str() == read_text_file(*r.run_dir / "report.txt"));
}

TEST_CASE("an unreachable planner yields a partial failure") {
  TempDir tmp("partial");
  auto reg = json::parse(read_text_file(kConfigs / "registry_smoke.json"));
  reg["chat"].push_back(json{{"id", "remote-planner"},
                             {"type", "http"},
                             {"role", "planner"},
                             {"base_url", "http://127.0.0.1:1"},
                             {"attempts", 1},
                             {"timeout_ms", 500}});
  write_text_file(tmp.path / "registry.json", reg.dump());
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path, [](json& j) {
    j["agents"][0]["planner"] = "remote-planner";
    j["attacks"] = json::array({"naive"});
  });
  opts.backend_registry = tmp.path / "registry.json";
  opts.out = tmp.path / "runs";
  const auto r = cmd_run(opts, out, err);
  CHECK(r.exit_code == kPartialFailure);
  REQUIRE(r.run_dir);
  CHECK(fs::exists(*r.run_dir / "report.json"));
}

TEST_CASE("output and registry locations honor flags before environment") {
  const auto cfg = config::load_config(kConfigs / "smoke.json");
  GlobalOptions opts;
  ::unsetenv(kOutDirEnv);
  ::unsetenv(kRegistryEnv);
  CHECK(resolve_out_dir(opts, cfg) == fs::path("runs"));
  CHECK_FALSE(resolve_registry_path(opts).has_value());
  ::setenv(kOutDirEnv, "/tmp/env-out", 1);
  ::setenv(kRegistryEnv, "/tmp/env-registry.json", 1);
  CHECK(resolve_out_dir(opts, cfg) == fs::path("/tmp/env-out"));
  CHECK(resolve_registry_path(opts) == fs::path("/tmp/env-registry.json"));
  opts.out = "/tmp/flag-out";
  opts.backend_registry = "/tmp/flag-registry.json";
  CHECK(resolve_out_dir(opts, cfg) == fs::path("/tmp/flag-out"));
  CHECK(resolve_registry_path(opts) == fs::path("/tmp/flag-registry.json"));
  ::unsetenv(kOutDirEnv);
  ::unsetenv(kRegistryEnv);

  opts = {};
  opts.config = kConfigs / "smoke.json";
  opts.seed = 99;
  CHECK(resolve_config(opts).seed == 99);
}

TEST_CASE("run directories never collide") {
  TempDir tmp("run_dirs");
  const auto cfg = config::load_config(kConfigs / "smoke.json");
  std::set<fs::path> seen;
  for (int i = 0; i < 5; ++i) {
    const auto dir = make_run_dir(tmp.path, cfg);
    CHECK(fs::is_directory(dir));
    CHECK(seen.insert(dir).second);
    CHECK(dir.filename().string().find(config::config_digest(cfg).substr(0, 12)) != std::string::npos);
  }
}

TEST_CASE("ablation axes and grids") {
  const auto cfg = config::load_config(kConfigs / "smoke.json");
  for (auto axis : {AblationAxis::kBudget, AblationAxis::kVisualIters, AblationAxis::kGcgIters, AblationAxis::kSurrogate,
                    AblationAxis::kAlignmentMode, AblationAxis::kEnhancementMode}) {
    CHECK(ablation_axis_from_string(to_string(axis)) == axis);
    const auto grid = ablation_grid(axis, {"mix-lm", "bigram-lm"});
    CHECK_FALSE(grid.empty());
    for (const auto& v : grid) CHECK_NOTHROW(apply_axis(cfg, axis, v));
  }
  CHECK(ablation_grid(AblationAxis::kBudget, {}) == std::vector<std::string>{"2", "4", "8", "16", "24", "32"});
  CHECK(apply_axis(cfg, AblationAxis::kBudget, "8").visual.budget.epsilon_8bit() == 8);
  CHECK(apply_axis(cfg, AblationAxis::kGcgIters, "75").gcg.iterations == 75);
  CHECK(apply_axis(cfg, AblationAxis::kSurrogate, "bigram-lm").surrogate_lm == "bigram-lm");
  CHECK_THROWS_AS(apply_axis(cfg, AblationAxis::kBudget, "300"), ConfigError);
  CHECK_THROWS_AS(apply_axis(cfg, AblationAxis::kBudget, "8x"), ConfigError);
  CHECK_THROWS_AS(apply_axis(cfg, AblationAxis::kVisualIters, "-1"), ConfigError);
  CHECK_THROWS_AS(apply_axis(cfg, AblationAxis::kAlignmentMode, "odd"), ConfigError);
  CHECK_THROWS_AS(ablation_axis_from_string("colour"), ConfigError);
}

TEST_CASE("ablate writes one run per grid value") {
  TempDir tmp("ablate");
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path);
  opts.out = tmp.path / "runs";
  const auto r = cmd_ablate(opts, "enhancement_mode", out, err);
  REQUIRE(r.exit_code == kOk);
  REQUIRE(r.run_dir);
  for (const char* v : {"full", "none", "real_system_prompt", "random_string"}) {
    CHECK(fs::exists(*r.run_dir / ("enhancement_mode=" + std::string(v)) / "report.json"));
  }
  const auto curve = json::parse(read_text_file(*r.run_dir / "curve.json"));
  CHECK(curve.dump().find("random_string") != std::string::npos);
  CHECK(fs::exists(*r.run_dir / "curve.txt"));
}

TEST_CASE("defend writes one column per defense setting") {
  TempDir tmp("defend");
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path);
  opts.out = tmp.path / "runs";
  const auto r = cmd_defend(opts, out, err);
  REQUIRE(r.exit_code == kOk);
  REQUIRE(r.run_dir);
  CHECK(fs::exists(*r.run_dir / "defense.json"));
  const auto table = read_text_file(*r.run_dir / "defense.txt");
  for (const char* c : {"ASR(none)", "ASR(text)", "ASR(vision)", "ASR(combined)", "PNA(none)"}) {
    CHECK(table.find(c) != std::string::npos);
  }
}

TEST_CASE("craft commands stream one trace line per iteration") {
  TempDir tmp("craft");
  std::mt19937_64 rng(80);
  write_image(tmp.path / "in.png", quantize_roundtrip(testing::random_image({40, 40}, rng)));
  std::ostringstream out, err;
  GlobalOptions opts;
  opts.config = write_tiny_config(tmp.path);
  opts.out = tmp.path / "runs";

  const auto v = cmd_craft_visual(opts, {"Say hello", tmp.path / "in.png", std::nullopt}, out, err);
  REQUIRE(v.exit_code == kOk);
  CHECK(line_count(*v.run_dir / "trace.jsonl") == 5);
  CHECK(read_image(*v.run_dir / "adversarial.png").size() == ImageSize{32, 32});
  const auto summary = json::parse(read_text_file(*v.run_dir / "summary.json"));
  CHECK(summary["linf"].get<double>() <= 16.0 / 255.0 + 1e-9);
  CHECK(summary["best_loss"].get<double>() <= summary["initial_loss"].get<double>());

  const auto c = cmd_craft_command(opts, {"A cooking assistant.", "Say hello", std::nullopt}, out, err);
  REQUIRE(c.exit_code == kOk);
  // Entry 0 is the random initial command.
  CHECK(line_count(*c.run_dir / "trace.jsonl") == 4 + 1);
  CHECK(fs::exists(*c.run_dir / "command.txt"));
  CHECK(fs::exists(*c.run_dir / "system_prompt.txt"));
  CHECK(read_text_file(*c.run_dir / "command_debug.txt").back() == '\n');
  CHECK(json::parse(read_text_file(*c.run_dir / "summary.json"))["target_action"] == "Sure, I will say hello");

  const auto full = cmd_craft_command(opts, {"A cooking assistant.", "Say hello", "Hello! Hello there."}, out, err);
  REQUIRE(full.exit_code == kOk);
  CHECK(json::parse(read_text_file(*full.run_dir / "summary.json"))["target_action"] == "Hello! Hello there.");
}
