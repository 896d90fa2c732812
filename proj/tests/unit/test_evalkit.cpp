#include <doctest.h>

#include <algorithm>
#include <set>

#include "crossinject/config.hpp"
#include "crossinject/evalkit.hpp"
#include "crossinject/io.hpp"
#include "helpers.hpp"

using namespace crossinject;
using namespace crossinject::evalkit;
using crossinject::backends::ChatRole;

namespace {

const std::filesystem::path kSentiment = config::fixtures_dir() / "datasets" / "sentiment-analysis.jsonl";

TrialRecord record(bool attacked, Verdict v) {
  TrialRecord r;
  r.attacked = attacked;
  r.verdict = v;
  return r;
}

JudgeRubrics rubrics() { return {"INJ {TASK} :: {RESPONSE}", "ROLE {ROLE} :: {RESPONSE}"}; }

config::ExperimentConfig small_smoke() {
  auto cfg = config::load_config(config::fixtures_dir() / "configs" / "smoke.json");
  cfg.agents.resize(1);
  cfg.repetitions = 2;
  cfg.tasks_per_dataset = 2;
  return cfg;
}

std::vector<std::string> trial_lines(const ExperimentOutput& out) {
  std::vector<std::string> lines;
  for (const auto& t : out.trials) lines.push_back(trial_record_line(t));
  return lines;
}

}  // namespace

TEST_CASE("datasets load and sample deterministically") {
  const auto items = load_dataset(kSentiment, "sentiment-analysis");
  CHECK(items.size() == 12);
  CHECK(items[0].reference == std::optional<std::string>("negative"));
  CHECK(sample_tasks(kSentiment, "sentiment-analysis", 5, 9) == sample_tasks(kSentiment, "sentiment-analysis", 5, 9));
  CHECK_THROWS_AS(sample_tasks(items, 13, 0), ArgumentError);
  CHECK_THROWS_AS(load_dataset(config::fixtures_dir() / "nope.jsonl", "x"), ConfigError);
}

TEST_CASE("samples are distinct members of the dataset") {
  const auto items = load_dataset(kSentiment, "sentiment-analysis");
  std::mt19937_64 rng(60);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = rng() % (items.size() + 1);
    const auto s = sample_tasks(items, n, rng());
    CHECK(s.size() == n);
    std::set<std::string> seen;
    for (const auto& item : s) {
      CHECK(std::find(items.begin(), items.end(), item) != items.end());
      seen.insert(item.instruction);
    }
    CHECK(seen.size() == n);
  }
}

TEST_CASE("judge verdicts") {
  const TaskItem task{"d", "do the thing", std::nullopt};
  testing::LambdaChat yes("j", ChatRole::kJudge, [](const std::string&, auto) { return std::string(" success\n"); });
  testing::LambdaChat no("j", ChatRole::kJudge, [](const std::string&, auto) { return std::string("FAILURE"); });
  testing::LambdaChat broken("j", ChatRole::kJudge, [](const std::string&, auto) -> std::string {
    throw BackendError("down");
  });
  CHECK(judge("r", task, true, yes, rubrics(), "role") == Verdict::kSuccess);
  CHECK(judge("r", task, true, no, rubrics(), "role") == Verdict::kFailure);
  CHECK(judge("r", task, false, broken, rubrics(), "role") == Verdict::kError);
  CHECK(judge(" \n\t", task, true, yes, rubrics(), "role") == Verdict::kFailure);
  CHECK(yes.calls == 1);
  testing::LambdaChat planner("p", ChatRole::kPlanner, [](const std::string&, auto) { return std::string("x"); });
  CHECK_THROWS_AS(judge("r", task, true, planner, rubrics(), "role"), ArgumentError);

  CHECK(render_rubric(rubrics(), "R", task, true, "cook") == "INJ do the thing :: R");
  CHECK(render_rubric(rubrics(), "R", task, false, "cook") == "ROLE cook :: R");
}

TEST_CASE("ASR and PNA on hand-counted trials") {
  std::vector<TrialRecord> attacked = {record(true, Verdict::kSuccess), record(true, Verdict::kFailure),
                                       record(true, Verdict::kError), record(true, Verdict::kSuccess)};
  CHECK(compute_asr(attacked) == 0.5);
  std::vector<TrialRecord> benign = {record(false, Verdict::kSuccess), record(false, Verdict::kSuccess),
                                     record(false, Verdict::kFailure)};
  CHECK(compute_pna(benign) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(compute_asr({}), ArgumentError);
  CHECK_THROWS_AS(compute_pna({}), ArgumentError);
  CHECK_THROWS_AS(compute_asr(benign), ArgumentError);
  CHECK_THROWS_AS(mean({}), ArgumentError);
}

TEST_CASE("mean over equal-size repetitions equals the pooled fraction") {
  std::mt19937_64 rng(61);
  for (int t = 0; t < 50; ++t) {
    const int reps = 1 + static_cast<int>(rng() % 5);
    const int n = 1 + static_cast<int>(rng() % 20);
    std::vector<TrialRecord> pooled;
    std::vector<double> per_rep;
    for (int r = 0; r < reps; ++r) {
      std::vector<TrialRecord> rep;
      for (int i = 0; i < n; ++i) rep.push_back(record(true, static_cast<Verdict>(rng() % 3)));
      per_rep.push_back(compute_asr(rep));
      pooled.insert(pooled.end(), rep.begin(), rep.end());
    }
    CHECK(std::abs(mean(per_rep) - compute_asr(pooled)) < 1e-12);
  }
}

TEST_CASE("derive_seed matches reference digests") {
  CHECK(derive_seed(0, "rep/0") == 2075800988834165299ULL);
  CHECK(derive_seed(42, "sample/text-editing") == 6387548364809425359ULL);
}

TEST_CASE("report json round-trips") {
  MetricsReport r;
  r.name = "x";
  r.attacks = {"naive", "crossinject", "jip"};
  r.error_trials = 2;
  CellMetrics m;
  m.asr_by_attack = {{"naive", 0.25}, {"crossinject", 0.75}, {"jip", std::nullopt}};
  m.asr_per_repetition = {{"naive", {0.0, 0.5}}, {"crossinject", {1.0, 0.5}}};
  m.pna_per_repetition = {1.0, 0.5};
  m.pna_mean = 0.75;
  m.asr_mean = 0.75;
  m.repetitions = 2;
  m.tasks = 4;
  r.cells.push_back({CellKey{"R", "p", "document", "d"}, m});
  const auto text = report_json(r);
  CHECK(report_json(report_from_json(text)) == text);
  const auto table = report_table(r);
  CHECK(table.find("ASR(jip)") != std::string::npos);
  CHECK(table.find("75.0") != std::string::npos);
  CHECK_THROWS_AS(report_from_json("{}"), ConfigError);
  CHECK_THROWS_AS(report_from_json("not json"), ConfigError);
}

TEST_CASE("runner covers every cell and is deterministic") {
  const auto cfg = small_smoke();
  const auto registry = load_registry(cfg);
  ExperimentRunner a(cfg, registry);
  const auto out = a.run();
  REQUIRE(out.report.cells.size() == 1);
  const auto& cell = out.report.cells[0].second;
  CHECK(cell.pna_mean == 1.0);
  CHECK(cell.asr_by_attack.at("naive") == 0.0);
  CHECK(cell.asr_by_attack.at("crossinject") == 1.0);
  CHECK(out.trials.size() == 2 * 2 * 3);
  CHECK(out.report.error_trials == 0);
  CHECK_FALSE(out.partial_failure());
  CHECK(std::is_sorted(out.trials.begin(), out.trials.end(),
                       [](const auto& x, const auto& y) { return x.trial_id < y.trial_id; }));

  ExperimentRunner b(cfg, registry);
  const auto again = b.run();
  CHECK(trial_lines(again) == trial_lines(out));
  CHECK(again.call_log_lines == out.call_log_lines);
  CHECK(report_json(again.report) == report_json(out.report));
}

TEST_CASE("judge failures become error trials without aborting the run") {
  auto cfg = small_smoke();
  cfg.attacks = {"naive"};
  auto base = load_registry(cfg);
  auto registry = std::make_shared<BackendRegistry>(*base);
  registry->add(std::make_shared<testing::LambdaChat>("flaky-judge", ChatRole::kJudge,
                                                      [](const std::string&, auto) -> std::string {
                                                        throw BackendError("judge unavailable");
                                                      }));
  cfg.judge = "flaky-judge";
  ExperimentRunner runner(cfg, registry);
  const auto out = runner.run();
  CHECK(out.partial_failure());
  CHECK(out.report.error_trials == static_cast<int>(out.trials.size()));
  for (const auto& t : out.trials) CHECK(t.verdict == Verdict::kError);
  CHECK(out.report.cells[0].second.pna_mean == 0.0);
}

TEST_CASE("reserved attacks are reported without trials") {
  auto cfg = small_smoke();
  cfg.attacks = {"naive", "jip"};
  ExperimentRunner runner(cfg, load_registry(cfg));
  const auto out = runner.run();
  CHECK_FALSE(out.report.cells[0].second.asr_by_attack.at("jip").has_value());
  for (const auto& t : out.trials) CHECK(t.attack != "jip");
}

TEST_CASE("runner rejects inconsistent configs") {
  auto cfg = small_smoke();
  cfg.tasks_per_dataset = 13;
  CHECK_THROWS_AS(ExperimentRunner(cfg, load_registry(cfg)), ConfigError);
  cfg = small_smoke();
  cfg.judge = "missing";
  CHECK_THROWS_AS(ExperimentRunner(cfg, load_registry(cfg)), ConfigError);
  cfg = small_smoke();
  cfg.image_size = {16, 16};
  CHECK_THROWS_AS(ExperimentRunner(cfg, load_registry(cfg)), ConfigError);
}

TEST_CASE("quantized delivery is recorded with each bundle") {
  auto cfg = small_smoke();
  cfg.repetitions = 1;
  cfg.tasks_per_dataset = 1;
  cfg.attacks = {"crossinject"};
  const auto registry = load_registry(cfg);
  ExperimentRunner plain(cfg, registry);
  const auto a = plain.run();
  cfg.quantize_images = true;
  ExperimentRunner quantized(cfg, registry);
  const auto b = quantized.run();
  REQUIRE(a.bundle_lines.size() == 1);
  REQUIRE(b.bundle_lines.size() == 1);
  CHECK(a.bundle_lines[0].find("\"quantized\":false") != std::string::npos);
  CHECK(b.bundle_lines[0].find("\"quantized\":true") != std::string::npos);
  CHECK(b.report.cells[0].second.asr_by_attack.at("crossinject") == 1.0);
}
