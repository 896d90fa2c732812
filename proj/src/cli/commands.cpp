#include "crossinject/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "crossinject/evalkit.hpp"
#include "crossinject/io.hpp"
#include "crossinject/textual_enhance.hpp"
#include "crossinject/visual_align.hpp"

namespace crossinject::cli {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

template <typename F>
CommandResult guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return {kConfigError, std::nullopt};
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return {kStageFailure, std::nullopt};
  }
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

std::string percent(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
  return buf;
}

std::string aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      line += r[c];
      if (c + 1 < r.size()) line += std::string(width[c] - r[c].size() + 2, ' ');
    }
    out += line + "\n";
  }
  return out;
}

std::optional<PixelMask> config_mask(const config::ExperimentConfig& cfg) {
  if (!cfg.mask) return std::nullopt;
  return PixelMask::rectangle(cfg.image_size, cfg.mask->top, cfg.mask->left, cfg.mask->height, cfg.mask->width);
}

std::shared_ptr<const BackendRegistry> registry_for(const GlobalOptions& opts, const config::ExperimentConfig& cfg) {
  return evalkit::load_registry(cfg, resolve_registry_path(opts));
}

void write_outputs(const fs::path& dir, const evalkit::ExperimentOutput& o) {
  write_text_file(dir / "report.json", evalkit::report_json(o.report));
  write_text_file(dir / "report.txt", evalkit::report_table(o.report));
  std::string trials;
  for (const auto& t : o.trials) trials += evalkit::trial_record_line(t) + "\n";
  write_text_file(dir / "trials.jsonl", trials);
  std::string calls;
  for (const auto& l : o.call_log_lines) calls += l + "\n";
  write_text_file(dir / "calls.jsonl", calls);
  std::string bundles;
  for (const auto& l : o.bundle_lines) bundles += l + "\n";
  write_text_file(dir / "bundles.jsonl", bundles);
}

void print_plan(const config::ExperimentConfig& cfg, std::ostream& out) {
  std::size_t trials_per_rep = 0;
  for (std::size_t a = 0; a < cfg.agents.size(); ++a) {
    trials_per_rep += cfg.surfaces.size() * cfg.datasets.size() * static_cast<std::size_t>(cfg.tasks_per_dataset) *
                      (cfg.attacks.size() + 1);
  }
  out << "name: " << cfg.name << "\n"
      << "agents: " << cfg.agents.size() << "\n"
      << "surfaces: " << cfg.surfaces.size() << "\n"
      << "datasets: " << cfg.datasets.size() << "\n"
      << "tasks_per_dataset: " << cfg.tasks_per_dataset << "\n"
      << "repetitions: " << cfg.repetitions << "\n"
      << "planner calls (upper bound): " << trials_per_rep * static_cast<std::size_t>(cfg.repetitions) << "\n"
      << "config digest: " << config::config_digest(cfg) << "\n";
}

}  // namespace

config::ExperimentConfig resolve_config(const GlobalOptions& opts) {
  const fs::path path = opts.config ? *opts.config : config::fixtures_dir() / "configs" / "default.json";
  auto cfg = config::load_config(path);
  if (opts.seed) cfg.seed = *opts.seed;
  cfg.check();
  return cfg;
}

fs::path resolve_out_dir(const GlobalOptions& opts, const config::ExperimentConfig& cfg) {
  if (opts.out) return *opts.out;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return cfg.output_dir;
}

std::optional<fs::path> resolve_registry_path(const GlobalOptions& opts) {
  if (opts.backend_registry) return opts.backend_registry;
  if (const char* env = std::getenv(kRegistryEnv); env && *env) return fs::path(env);
  return std::nullopt;
}

fs::path make_run_dir(const fs::path& out_dir, const config::ExperimentConfig& cfg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-" + config::config_digest(cfg).substr(0, 12);
  fs::create_directories(out_dir);
  fs::path dir = out_dir / base;
  for (int n = 1; !fs::create_directory(dir); ++n) dir = out_dir / (base + "-" + std::to_string(n));
  return dir;
}

// ------------------------------------------------------------------------- ablation

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kBudget: return "budget";
    case AblationAxis::kVisualIters: return "visual_iters";
    case AblationAxis::kGcgIters: return "gcg_iters";
    case AblationAxis::kSurrogate: return "surrogate";
    case AblationAxis::kAlignmentMode: return "alignment_mode";
    case AblationAxis::kEnhancementMode: return "enhancement_mode";
  }
  return "budget";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  for (auto a : {AblationAxis::kBudget, AblationAxis::kVisualIters, AblationAxis::kGcgIters, AblationAxis::kSurrogate,
                 AblationAxis::kAlignmentMode, AblationAxis::kEnhancementMode}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown ablation axis '" + s + "'");
}

std::vector<std::string> ablation_grid(AblationAxis axis, const std::vector<std::string>& lm_ids) {
  switch (axis) {
    case AblationAxis::kBudget: return {"2", "4", "8", "16", "24", "32"};
    case AblationAxis::kVisualIters: return {"50", "100", "150", "200"};
    case AblationAxis::kGcgIters: return {"50", "75", "100", "125", "150"};
    case AblationAxis::kSurrogate: return lm_ids;
    case AblationAxis::kAlignmentMode: return {"full", "none", "random_noise", "align_with_text"};
    case AblationAxis::kEnhancementMode: return {"full", "none", "real_system_prompt", "random_string"};
  }
  return {};
}

config::ExperimentConfig apply_axis(config::ExperimentConfig cfg, AblationAxis axis, const std::string& value) {
  auto as_int = [&](int lo) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || v < lo) throw ConfigError("bad " + to_string(axis) + " value '" + value + "'");
    return v;
  };
  switch (axis) {
    case AblationAxis::kBudget: {
      const int v = as_int(0);
      if (v > 255) throw ConfigError("budget must be at most 255");
      cfg.visual.budget = PixelBudget(v);
      break;
    }
    case AblationAxis::kVisualIters: cfg.visual.iterations = as_int(0); break;
    case AblationAxis::kGcgIters: cfg.gcg.iterations = as_int(0); break;
    case AblationAxis::kSurrogate: cfg.surrogate_lm = value; break;
    case AblationAxis::kAlignmentMode: cfg.alignment_mode = config::alignment_mode_from_string(value); break;
    case AblationAxis::kEnhancementMode: cfg.enhancement_mode = config::enhancement_mode_from_string(value); break;
  }
  cfg.check();
  return cfg;
}

// ------------------------------------------------------------------------- commands

CommandResult cmd_craft_visual(const GlobalOptions& opts, const CraftVisualArgs& args, std::ostream& out,
                               std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const auto cfg = resolve_config(opts);
    if (args.instruction.empty()) throw ConfigError("--instruction must be non-empty");
    const auto registry = registry_for(opts, cfg);
    visual::EncoderList encoders;
    for (const auto& id : cfg.visual.encoder_ids) encoders.push_back(registry->encoder(id));
    auto vcfg = cfg.visual;
    vcfg.mask = config_mask(cfg);
    vcfg.seed = evalkit::derive_seed(cfg.seed, "craft-visual");

    out << "epsilon: " << vcfg.budget.epsilon_8bit() << "/255\n"
        << "iterations: " << vcfg.iterations << "\n"
        << "encoders: " << vcfg.encoder_ids.size() << "\n"
        << "ssa_samples: " << vcfg.ssa_samples << "\n";
    if (opts.dry_run) return {kOk, std::nullopt};

    ImageTensor image;
    try {
      image = resize_bilinear(read_image(args.image), cfg.image_size);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    auto instr = make_instruction(args.instruction);
    ImageTensor target;
    if (args.target_image) {
      try {
        target = read_image(*args.target_image);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    } else {
      instr = cfg.reformulator == "template"
                  ? visual::reformulate_instruction(instr)
                  : visual::reformulate_instruction(instr, *registry->chat(cfg.reformulator));
      target = visual::acquire_target_image(instr, *registry->t2i(cfg.t2i), cfg.target_seed);
    }
    target = resize_bilinear(target, cfg.image_size);

    const auto dir = make_run_dir(resolve_out_dir(opts, cfg), cfg);
    write_text_file(dir / "config.json", config::serialize_config(cfg));
    std::ofstream trace(dir / "trace.jsonl", std::ios::binary);
    const auto result = visual::optimize_perturbation(image, target, vcfg, encoders, [&](const visual::TraceRecord& r) {
      trace << visual::trace_record_line(r) << "\n";
      trace.flush();
    });
    trace.close();

    const auto adversarial = visual::apply_perturbation(image, result.perturbation);
    write_image(dir / "adversarial.png", adversarial);
    write_image(dir / "target.png", target);
    ordered_json s;
    s["instruction"] = instr.d;
    s["descriptive_prompt"] = instr.d_prime ? ordered_json(*instr.d_prime) : ordered_json(nullptr);
    s["epsilon_8bit"] = vcfg.budget.epsilon_8bit();
    s["iterations"] = vcfg.iterations;
    s["encoders"] = vcfg.encoder_ids;
    s["seed"] = vcfg.seed;
    s["initial_loss"] = result.trace.initial_loss;
    s["best_loss"] = result.trace.best_loss;
    s["best_iteration"] = result.trace.best_iteration;
    s["linf"] = result.perturbation.linf();
    s["image_sha256"] = image_digest(adversarial);
    write_text_file(dir / "summary.json", s.dump(2) + "\n");

    out << "initial_loss: " << fmt(result.trace.initial_loss) << "\n"
        << "best_loss: " << fmt(result.trace.best_loss) << " (iteration " << result.trace.best_iteration << ")\n"
        << "linf: " << fmt(result.perturbation.linf() * 255.0, 4) << "/255\n"
        << "run_dir: " << dir.string() << "\n";
    return {kOk, dir};
  });
}

CommandResult cmd_craft_command(const GlobalOptions& opts, const CraftCommandArgs& args, std::ostream& out,
                                std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const auto cfg = resolve_config(opts);
    if (args.instruction.empty()) throw ConfigError("--instruction must be non-empty");
    if (args.role_description.empty()) throw ConfigError("--role-description must be non-empty");
    const auto registry = registry_for(opts, cfg);
    const auto lm = registry->lm(cfg.surrogate_lm);
    const auto constructor = registry->chat(cfg.constructor);
    auto gcg = cfg.gcg;
    gcg.seed = evalkit::derive_seed(cfg.seed, "craft-command");
    gcg.check(lm->tokenizer().vocab_size());

    out << "top_k: " << gcg.top_k << "\n"
        << "batch_size: " << gcg.batch_size << "\n"
        << "iterations: " << gcg.iterations << "\n"
        << "command_length: " << gcg.command_length << "\n";
    if (opts.dry_run) return {kOk, std::nullopt};

    textual::MetaPromptTemplate tmpl{"meta", read_text_file(cfg.prompt_path(cfg.prompts.meta_template, "meta_template.txt"))};
    while (!tmpl.body.empty() && (tmpl.body.back() == '\n' || tmpl.body.back() == '\r')) tmpl.body.pop_back();
    tmpl.check();
    std::string rule = read_text_file(cfg.prompt_path(cfg.prompts.defensive_rule, "defensive_rule.txt"));
    while (!rule.empty() && (rule.back() == '\n' || rule.back() == '\r')) rule.pop_back();
    const auto meta = textual::build_meta_prompt(args.role_description, rule, tmpl);
    const auto sys = textual::construct_defensive_system_prompt(meta, *constructor, args.role_description, rule);

    const auto dir = make_run_dir(resolve_out_dir(opts, cfg), cfg);
    write_text_file(dir / "config.json", config::serialize_config(cfg));
    write_text_file(dir / "system_prompt.txt", sys.generated_text);
    std::ofstream trace(dir / "trace.jsonl", std::ios::binary);
    const auto instr = make_instruction(args.instruction, args.target_action);
    const auto adv = textual::optimize_command(gcg, sys, instr, *lm, [&](int i, double l) {
      trace << textual::loss_record_line(i, l) << "\n";
      trace.flush();
    });
    trace.close();

    for (std::size_t i = 1; i < adv.loss_trace.size(); ++i) {
      if (adv.loss_trace[i] > adv.loss_trace[i - 1]) {
        throw Error("loss increased at iteration " + std::to_string(i));
      }
    }
    write_text_file(dir / "command.txt", adv.rendered);
    write_text_file(dir / "command_debug.txt", textual::escape_visible(adv.rendered) + "\n");
    ordered_json s;
    s["instruction"] = args.instruction;
    s["target_action"] = instr.target_action;
    s["top_k"] = gcg.top_k;
    s["batch_size"] = gcg.batch_size;
    s["iterations"] = gcg.iterations;
    s["command_length"] = gcg.command_length;
    s["seed"] = gcg.seed;
    s["surrogate_lm"] = cfg.surrogate_lm;
    s["initial_loss"] = adv.loss_trace.front();
    s["final_loss"] = adv.final_loss;
    s["tokens"] = adv.tokens;
    write_text_file(dir / "summary.json", s.dump(2) + "\n");

    out << "initial_loss: " << fmt(adv.loss_trace.front()) << "\n"
        << "final_loss: " << fmt(adv.final_loss) << "\n"
        << "command: " << textual::escape_visible(adv.rendered) << "\n"
        << "run_dir: " << dir.string() << "\n";
    return {kOk, dir};
  });
}

CommandResult cmd_run(const GlobalOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const auto cfg = resolve_config(opts);
    evalkit::ExperimentRunner runner(cfg, registry_for(opts, cfg));
    if (opts.dry_run) {
      print_plan(cfg, out);
      return {kOk, std::nullopt};
    }
    const auto output = runner.run();
    const auto dir = make_run_dir(resolve_out_dir(opts, cfg), cfg);
    write_text_file(dir / "config.json", config::serialize_config(cfg));
    write_outputs(dir, output);
    out << evalkit::report_table(output.report);
    out << "run_dir: " << dir.string() << "\n";
    if (output.partial_failure()) {
      err << output.report.error_trials << " trial(s) ended in a backend error\n";
      return {kPartialFailure, dir};
    }
    return {kOk, dir};
  });
}

CommandResult cmd_ablate(const GlobalOptions& opts, const std::string& axis_name, std::ostream& out,
                         std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const auto axis = ablation_axis_from_string(axis_name);
    const auto cfg = resolve_config(opts);
    const auto registry = registry_for(opts, cfg);
    const auto grid = ablation_grid(axis, registry->lm_ids());
    std::vector<config::ExperimentConfig> configs;
    for (const auto& v : grid) configs.push_back(apply_axis(cfg, axis, v));
    for (const auto& c : configs) evalkit::ExperimentRunner(c, registry);
    if (opts.dry_run) {
      out << "axis: " << to_string(axis) << "\nvalues:";
      for (const auto& v : grid) out << " " << v;
      out << "\n";
      return {kOk, std::nullopt};
    }

    const auto dir = make_run_dir(resolve_out_dir(opts, cfg), cfg);
    write_text_file(dir / "config.json", config::serialize_config(cfg));
    ordered_json curve;
    curve["axis"] = to_string(axis);
    curve["points"] = ordered_json::array();
    std::vector<std::vector<std::string>> rows{{to_string(axis), "ASR", "PNA"}};
    bool partial = false;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      evalkit::ExperimentRunner runner(configs[i], registry);
      const auto o = runner.run();
      partial = partial || o.partial_failure();
      const auto sub = dir / (to_string(axis) + "=" + grid[i]);
      write_text_file(sub / "config.json", config::serialize_config(configs[i]));
      write_outputs(sub, o);
      std::vector<double> asr, pna;
      for (const auto& [_, m] : o.report.cells) {
        asr.push_back(m.asr_mean);
        pna.push_back(m.pna_mean);
      }
      const double a = asr.empty() ? 0.0 : evalkit::mean(asr);
      const double p = pna.empty() ? 0.0 : evalkit::mean(pna);
      curve["points"].push_back({{"value", grid[i]}, {"asr", a}, {"pna", p}, {"error_trials", o.report.error_trials}});
      rows.push_back({grid[i], percent(a), percent(p)});
    }
    write_text_file(dir / "curve.json", curve.dump(2) + "\n");
    const auto table = aligned(rows);
    write_text_file(dir / "curve.txt", table);
    out << table << "run_dir: " << dir.string() << "\n";
    return {partial ? kPartialFailure : kOk, dir};
  });
}

CommandResult cmd_defend(const GlobalOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const auto cfg = resolve_config(opts);
    evalkit::ExperimentRunner runner(cfg, registry_for(opts, cfg));
    const std::vector<std::pair<std::string, harness::DefenseConfig>> columns = [&] {
      auto none = cfg.defense;
      none.sandwich = false;
      none.blur = false;
      auto text = none;
      text.sandwich = true;
      auto vision = none;
      vision.blur = true;
      auto combined = text;
      combined.blur = true;
      return std::vector<std::pair<std::string, harness::DefenseConfig>>{
          {"none", none}, {"text", text}, {"vision", vision}, {"combined", combined}};
    }();
    if (opts.dry_run) {
      print_plan(cfg, out);
      out << "defenses: none text vision combined\n";
      return {kOk, std::nullopt};
    }

    const auto dir = make_run_dir(resolve_out_dir(opts, cfg), cfg);
    write_text_file(dir / "config.json", config::serialize_config(cfg));
    ordered_json doc;
    doc["name"] = cfg.name;
    doc["blur_kernel"] = cfg.defense.blur_kernel;
    doc["blur_sigma"] = cfg.defense.effective_sigma();
    doc["columns"] = ordered_json::array();
    std::vector<evalkit::MetricsReport> reports;
    bool partial = false;
    for (const auto& [name, defense] : columns) {
      const auto o = runner.run(defense);
      partial = partial || o.partial_failure();
      write_outputs(dir / name, o);
      doc["columns"].push_back(name);
      reports.push_back(o.report);
    }
    doc["cells"] = ordered_json::array();
    std::vector<std::vector<std::string>> rows{{"Role", "Model", "Surface", "Dataset"}};
    for (const auto& [name, _] : columns) rows[0].push_back("ASR(" + name + ")");
    for (const auto& [name, _] : columns) rows[0].push_back("PNA(" + name + ")");
    for (std::size_t c = 0; c < reports.front().cells.size(); ++c) {
      const auto& key = reports.front().cells[c].first;
      ordered_json cell;
      cell["role"] = key.role;
      cell["model"] = key.model;
      cell["surface"] = key.surface;
      cell["dataset"] = key.dataset;
      std::vector<std::string> row{key.role, key.model, key.surface, key.dataset};
      ordered_json asr = ordered_json::object(), pna = ordered_json::object();
      for (std::size_t k = 0; k < columns.size(); ++k) {
        asr[columns[k].first] = reports[k].cells[c].second.asr_mean;
        row.push_back(percent(reports[k].cells[c].second.asr_mean));
      }
      for (std::size_t k = 0; k < columns.size(); ++k) {
        pna[columns[k].first] = reports[k].cells[c].second.pna_mean;
        row.push_back(percent(reports[k].cells[c].second.pna_mean));
      }
      rows.push_back(std::move(row));
      cell["asr"] = std::move(asr);
      cell["pna"] = std::move(pna);
      doc["cells"].push_back(std::move(cell));
    }
    write_text_file(dir / "defense.json", doc.dump(2) + "\n");
    const auto table = aligned(rows);
    write_text_file(dir / "defense.txt", table);
    out << table << "run_dir: " << dir.string() << "\n";
    return {partial ? kPartialFailure : kOk, dir};
  });
}

CommandResult cmd_report(const fs::path& path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> CommandResult {
    const fs::path file = fs::is_directory(path) ? path / "report.json" : path;
    std::string text;
    try {
      text = read_text_file(file);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    out << evalkit::report_table(evalkit::report_from_json(text));
    return {kOk, std::nullopt};
  });
}

}  // namespace crossinject::cli
