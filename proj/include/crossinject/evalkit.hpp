#pragma once

// Task sampling, judging, ASR/PNA metrics and the experiment runner.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "crossinject/config.hpp"
#include "crossinject/registry.hpp"

namespace crossinject::evalkit {

struct TaskItem {
  std::string dataset_id;
  std::string instruction;
  std::optional<std::string> reference;
  bool operator==(const TaskItem&) const = default;
};

/// JSONL, one {"instruction": ..., "reference": ...} object per line; blank lines skipped.
std::vector<TaskItem> load_dataset(const std::filesystem::path& path, const std::string& dataset_id);
/// Seeded Fisher-Yates shuffle, first n items. Throws ArgumentError when n exceeds the size.
std::vector<TaskItem> sample_tasks(std::vector<TaskItem> items, std::size_t n, std::uint64_t seed);
std::vector<TaskItem> sample_tasks(const std::filesystem::path& path, const std::string& dataset_id,
                                   std::size_t n = 100, std::uint64_t seed = 0);

enum class Verdict { kSuccess, kFailure, kError };
std::string to_string(Verdict v);

/// Rubric templates with {ROLE}, {TASK} and {RESPONSE} slots.
struct JudgeRubrics {
  std::string injected_task;
  std::string in_role;
};

/// Renders the rubric that applies to the trial.
std::string render_rubric(const JudgeRubrics& rubrics, const std::string& response, const TaskItem& task,
                          bool attacked, const std::string& role_description);

/// Attacked trials succeed when the injected task was executed; benign ones when the agent
/// stayed in role. Empty responses fail without a judge call; backend failures yield kError.
Verdict judge(const std::string& response, const TaskItem& task, bool attacked, const backends::ChatBackend& judge,
              const JudgeRubrics& rubrics, const std::string& role_description);

struct TrialRecord {
  std::string trial_id;
  std::string agent_id;
  std::string model;
  std::string surface;  // document, webpage or none
  TaskItem task;
  bool attacked = false;
  std::string attack;  // "benign" for unattacked trials
  int repetition = 0;
  std::string response;
  Verdict verdict = Verdict::kFailure;
  std::uint64_t seed = 0;
  std::string error;
};

std::string trial_record_line(const TrialRecord& r);

/// Success fraction over attacked trials; errors count as failures. Empty -> ArgumentError.
double compute_asr(const std::vector<TrialRecord>& records);
/// Success fraction over benign trials. Empty -> ArgumentError.
double compute_pna(const std::vector<TrialRecord>& records);
double mean(const std::vector<double>& values);

struct CellKey {
  std::string role;
  std::string model;
  std::string surface;
  std::string dataset;
  auto operator<=>(const CellKey&) const = default;
};

struct CellMetrics {
  /// Mean ASR over repetitions; absent for reserved attack modes.
  std::map<std::string, std::optional<double>> asr_by_attack;
  std::map<std::string, std::vector<double>> asr_per_repetition;
  std::vector<double> pna_per_repetition;
  double asr_mean = 0.0;
  double pna_mean = 0.0;
  int repetitions = 0;
  int tasks = 0;
};

struct MetricsReport {
  std::string name;
  std::vector<std::string> attacks;
  std::vector<std::pair<CellKey, CellMetrics>> cells;
  int error_trials = 0;
};

std::string report_json(const MetricsReport& report);
/// Inverse of report_json. Throws ConfigError on malformed input.
MetricsReport report_from_json(const std::string& text);
/// Aligned plain-text table, one row per cell, percentages with one decimal.
std::string report_table(const MetricsReport& report);

struct ExperimentOutput {
  MetricsReport report;
  std::vector<TrialRecord> trials;          // sorted by trial_id
  std::vector<std::string> call_log_lines;  // sorted by trial_id
  std::vector<std::string> bundle_lines;    // one per crafted bundle, sorted
  bool partial_failure() const { return report.error_trials > 0; }
};

/// Deterministic 64-bit seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, const std::string& label);

/// Every instruction of every configured dataset.
std::vector<std::string> dataset_instructions(const config::ExperimentConfig& cfg);

/// Loads fixtures once and memoizes crafted attack channels across runs.
class ExperimentRunner {
 public:
  ExperimentRunner(config::ExperimentConfig cfg, std::shared_ptr<const BackendRegistry> registry);
  ~ExperimentRunner();
  ExperimentRunner(const ExperimentRunner&) = delete;
  ExperimentRunner& operator=(const ExperimentRunner&) = delete;

  const config::ExperimentConfig& config() const;
  /// Runs the configured grid under `defense` (the config's own when unset).
  ExperimentOutput run(const std::optional<harness::DefenseConfig>& defense = std::nullopt);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Loads the registry named by the config and runs it once.
ExperimentOutput run_experiment(const config::ExperimentConfig& cfg);
std::shared_ptr<const BackendRegistry> load_registry(const config::ExperimentConfig& cfg,
                                                     const std::optional<std::filesystem::path>& override_path = {});

}  // namespace crossinject::evalkit
