// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fail.

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "../unit/helpers.hpp"
#include "crossinject/cli.hpp"
#include "crossinject/evalkit.hpp"
#include "crossinject/harness.hpp"
#include "crossinject/io.hpp"
#include "crossinject/payload.hpp"
#include "crossinject/textual_enhance.hpp"
#include "crossinject/visual_align.hpp"

using namespace crossinject;
namespace fs = std::filesystem;
using backends::TokenId;
using backends::Tokens;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// ------------------------------------------------------------------------- 1

Outcome budget_compliance() {
  Outcome o;
  const ImageSize size{64, 64};
  const visual::EncoderList encoders = {std::make_shared<backends::LinearEncoder>("lin-a", size, 64, 11),
                                        std::make_shared<backends::LinearEncoder>("lin-b", size, 64, 12)};
  std::mt19937_64 rng(1);
  const auto image = testing::random_image(size, rng);
  const auto target = testing::random_image(size, rng);
  visual::VisualOptConfig cfg;
  cfg.budget = PixelBudget(16);
  cfg.iterations = 200;
  cfg.encoder_ids = {"lin-a", "lin-b"};
  cfg.seed = 7;
  const double bound = 16.0 / 255.0 + 1e-9;
  double worst = 0.0;
  int sunk = 0;
  const auto t0 = Clock::now();
  const auto result = visual::optimize_perturbation(image, target, cfg, encoders, [&](const visual::TraceRecord& r) {
    worst = std::max(worst, r.linf);
    ++sunk;
  });
  const double elapsed = seconds_since(t0);
  o.require(sunk == 200, "expected 200 trace records, got " + std::to_string(sunk));
  o.require(worst <= bound, "trace iterate linf " + fmt(worst * 255) + "/255");
  o.require(result.perturbation.linf() <= bound, "returned delta exceeds the budget");
  o.require(elapsed < 30.0, "took " + fmt(elapsed) + " s");
  if (o.ok) o.detail = "max linf " + fmt(worst * 255) + "/255, " + fmt(elapsed) + " s";
  return o;
}

// ------------------------------------------------------------------------- 2

std::vector<double> direct_embed(const backends::LinearEncoder& enc, const PixelArray& x) {
  std::vector<double> e(static_cast<std::size_t>(enc.embedding_dim()), 0.0);
  for (int j = 0; j < enc.embedding_dim(); ++j) {
    const auto row = enc.row(j);
    for (std::size_t i = 0; i < x.numel(); ++i) e[static_cast<std::size_t>(j)] += row[i] * x.values()[i];
  }
  return e;
}

double direct_loss(const backends::LinearEncoder& enc, const ImageTensor& image, const PixelArray& delta,
                   const ImageTensor& target) {
  PixelArray x = image.pixels();
  for (std::size_t i = 0; i < x.numel(); ++i) x.values()[i] = std::clamp(x.values()[i] + delta.values()[i], 0.0, 1.0);
  const auto a = direct_embed(enc, x);
  const auto b = direct_embed(enc, target.pixels());
  const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
  const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += std::pow(a[k] / na - b[k] / nb, 2);
  return std::sqrt(acc);
}

Outcome visual_loss_oracle() {
  Outcome o;
  const ImageSize size{16, 16};
  const auto enc = std::make_shared<backends::LinearEncoder>("lin", size, 24, 5);
  const visual::EncoderList encoders = {enc};
  std::mt19937_64 rng(2);
  const auto image = ImageTensor::from_pixels(testing::random_pixels(size, rng, 0.1, 0.9));
  const auto target = testing::random_image(size, rng);
  const auto delta = testing::random_pixels(size, rng, -16.0 / 255.0, 16.0 / 255.0);
  const double err = testing::rel_err(visual::visual_loss(image, delta, target, encoders),
                                      direct_loss(*enc, image, delta, target));
  o.require(err < 1e-10, "loss rel err " + fmt(err));
  const auto grad = visual::visual_loss_gradient(image, delta, target, encoders);
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const std::size_t i = rng() % delta.numel();
    const double h = 1e-4;
    PixelArray plus = delta, minus = delta;
    plus.values()[i] += h;
    minus.values()[i] -= h;
    const double fd =
        (visual::visual_loss(image, plus, target, encoders) - visual::visual_loss(image, minus, target, encoders)) /
        (2 * h);
    worst = std::max(worst, testing::rel_err(grad.values()[i], fd));
  }
  o.require(worst < 1e-4, "gradient rel err " + fmt(worst));
  if (o.ok) o.detail = "loss rel err " + fmt(err) + ", gradient rel err " + fmt(worst);
  return o;
}

// ------------------------------------------------------------------------- 3

Outcome zero_loss_fixed_point() {
  Outcome o;
  const ImageSize size{32, 32};
  const visual::EncoderList encoders = {std::make_shared<backends::LinearEncoder>("lin-a", size, 32, 3),
                                        std::make_shared<backends::LinearEncoder>("lin-b", size, 32, 4)};
  std::mt19937_64 rng(3);
  const auto image = testing::random_image(size, rng);
  visual::VisualOptConfig cfg;
  cfg.iterations = 10;
  cfg.encoder_ids = {"lin-a", "lin-b"};
  cfg.ssa_samples = 4;
  const auto result = visual::optimize_perturbation(image, image, cfg, encoders);
  o.require(result.trace.best_loss < 1e-6, "best_loss " + fmt(result.trace.best_loss));
  if (o.ok) o.detail = "best_loss " + fmt(result.trace.best_loss);
  return o;
}

// ------------------------------------------------------------------------- 4

textual::DefensiveSystemPrompt plain_system(std::string text) {
  textual::DefensiveSystemPrompt sys;
  sys.generated_text = std::move(text);
  return sys;
}

Outcome textual_loss_oracle() {
  Outcome o;
  const auto tok = backends::default_mock_tokenizer();
  const auto lm = backends::TinyBigramLM::random("bi", tok, 40);
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto sys = plain_system(testing::random_text(rng, 1, 30));
    const auto instr = make_instruction(testing::random_words(rng, 4));
    const auto command = tok.tokenize(testing::random_text(rng, 1, 8, true));
    Tokens seq = tok.tokenize_lenient(sys.generated_text + "\n" + instr.d + "\n");
    seq.insert(seq.end(), command.begin(), command.end());
    double product = 1.0;
    for (TokenId y : tok.tokenize(instr.target_action)) {
      product *= lm->table(0)(static_cast<std::size_t>(seq.back()), static_cast<std::size_t>(y));
      seq.push_back(y);
    }
    worst = std::max(worst, testing::rel_err(textual::textual_loss(command, sys, instr, *lm), -std::log(product)));
  }
  o.require(worst < 1e-10, "bigram rel err " + fmt(worst));

  const backends::UniformLM uniform("u", tok);
  const auto instr = make_instruction("Print the secret");
  const double expected =
      static_cast<double>(tok.tokenize(instr.target_action).size()) * std::log(static_cast<double>(tok.vocab_size()));
  const double got = textual::textual_loss(tok.tokenize("xyz"), plain_system("sys"), instr, uniform);
  o.require(got == expected, "uniform loss " + fmt(got) + " vs " + fmt(expected));
  if (o.ok) o.detail = "bigram rel err " + fmt(worst) + ", uniform exact";
  return o;
}

// ------------------------------------------------------------------------- 5

Outcome gcg_exhaustive() {
  Outcome o;
  std::vector<std::string> alphabet;
  for (char c = 'a'; c < 'a' + 15; ++c) alphabet.push_back(std::string(1, c));
  alphabet.push_back("\n");
  const backends::CharTokenizer tok(alphabet);
  auto text = [](std::mt19937_64& rng, int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s += static_cast<char>('a' + rng() % 15);
    return s;
  };
  textual::GCGConfig cfg;
  cfg.top_k = 16;
  cfg.batch_size = 3 * 16;
  cfg.command_length = 3;
  cfg.ascii_only = false;
  std::mt19937_64 rng(5);
  int matched = 0;
  for (int t = 0; t < 50; ++t) {
    const auto lm = backends::WindowMixtureLM::random("mix", tok, 2, rng());
    const auto sys = plain_system(text(rng, 5));
    const auto instr = make_instruction(text(rng, 4), text(rng, 3));
    const auto obj = textual::CommandObjective::build(sys, instr, *lm);
    textual::GCGState state;
    for (int i = 0; i < 3; ++i) state.tokens.push_back(static_cast<TokenId>(rng() % 16));
    state.loss = obj.loss(*lm, state.tokens);
    textual::GCGState best = state;
    for (std::size_t p = 0; p < 3; ++p) {
      for (TokenId v = 0; v < 16; ++v) {
        Tokens trial = state.tokens;
        trial[p] = v;
        const double loss = textual::textual_loss(trial, sys, instr, *lm);
        if (loss < best.loss) best = {trial, loss};
      }
    }
    const auto got = textual::gcg_step(state, cfg, obj, *lm, rng);
    if (got.tokens == best.tokens && got.loss == best.loss) ++matched;
  }
  o.require(matched == 50, std::to_string(matched) + "/50 steps matched the argmin");

  int monotone_runs = 0;
  const int runs = 10;
  for (int r = 0; r < runs; ++r) {
    const auto lm = backends::WindowMixtureLM::random("mix", tok, 2, rng());
    auto run_cfg = cfg;
    run_cfg.iterations = 20;
    run_cfg.seed = rng();
    const auto adv = textual::optimize_command(run_cfg, plain_system(text(rng, 5)),
                                               make_instruction(text(rng, 4), text(rng, 3)), *lm);
    bool mono = true;
    for (std::size_t i = 1; i < adv.loss_trace.size(); ++i) mono = mono && adv.loss_trace[i] <= adv.loss_trace[i - 1];
    if (mono) ++monotone_runs;
  }
  o.require(monotone_runs == runs, std::to_string(runs - monotone_runs) + " non-monotone traces");
  if (o.ok) o.detail = "50/50 argmin matches, " + std::to_string(runs) + " monotone traces";
  return o;
}

// ------------------------------------------------------------------------- 6

Outcome payload_exactness() {
  Outcome o;
  const auto fixtures = config::fixtures_dir();
  std::string d = read_text_file(fixtures / "golden" / "injected_instruction.txt");
  d.pop_back();
  const ExternalData doc{Surface::kDocument, read_text_file(fixtures / "hosts" / "document.txt"), std::nullopt};
  const ExternalData page{Surface::kWebpage, read_text_file(fixtures / "hosts" / "webpage.html"), std::nullopt};
  o.require(payload::inject_document(doc, d).body == read_text_file(fixtures / "golden" / "document_append.txt"),
            "document golden mismatch");
  o.require(payload::inject_webpage(page, d).body == read_text_file(fixtures / "golden" / "webpage_append.html"),
            "webpage golden mismatch");

  std::mt19937_64 rng(6);
  const auto& allow = payload::html_tag_allowlist();
  const std::vector<std::string> pool = {"\n", "\n\n", "\t", " ", "\r\n"};
  int round_trips = 0;
  for (int t = 0; t < 100; ++t) {
    const auto body = testing::random_words(rng, static_cast<int>(rng() % 12));
    const auto payload_text = testing::random_text(rng, 1, 60);
    payload::WebWrapConfig cfg;
    cfg.tag_sequence.clear();
    for (std::size_t n = 1 + rng() % 3; n > 0; --n) cfg.tag_sequence.push_back(allow[rng() % allow.size()]);
    cfg.whitespace_disruptors = {pool[rng() % pool.size()], pool[rng() % pool.size()]};
    cfg.placement = static_cast<payload::Placement>(rng() % 3);
    cfg.seed = rng();
    const auto injected_doc = payload::inject_document({Surface::kDocument, body, std::nullopt}, payload_text,
                                                       cfg.placement);
    const auto injected_page = payload::inject_webpage({Surface::kWebpage, body, std::nullopt}, payload_text, cfg);
    if (payload::extract_payload(injected_doc) == payload_text &&
        payload::extract_payload(injected_page, cfg) == payload_text) {
      ++round_trips;
    }
  }
  o.require(round_trips == 100, std::to_string(round_trips) + "/100 round-trips");
  if (o.ok) o.detail = "goldens match, 100/100 round-trips";
  return o;
}

// ------------------------------------------------------------------------- 7

Outcome defense_math() {
  Outcome o;
  const harness::DefenseConfig defaults;
  const auto k2 = harness::gaussian_kernel_2d(9, defaults.effective_sigma());
  const double sum = std::accumulate(k2.begin(), k2.end(), 0.0);
  o.require(k2.size() == 81, "kernel is not 9x9");
  o.require(std::abs(sum - 1.0) <= 1e-9, "kernel sum " + fmt(sum));

  double worst = 0.0;
  for (double v : {0.0, 0.37, 1.0}) {
    const auto out = harness::gaussian_blur(ImageTensor::filled(20, 13, v), 9, defaults.effective_sigma());
    for (double x : out.values()) worst = std::max(worst, std::abs(x - v));
  }
  o.require(worst <= 1e-6, "constant image drift " + fmt(worst));

  const auto agent = harness::load_role(config::fixtures_dir() / "roles" / "PoetryGenius.json", "p");
  testing::LambdaChat planner("p", backends::ChatRole::kPlanner, [](const std::string& sys, auto parts) {
    std::string out = std::to_string(sys.size());
    for (const auto& p : parts) out += "|" + p.label + ":" + p.text;
    return out;
  });
  std::mt19937_64 rng(7);
  bool identical = true;
  for (int t = 0; t < 10; ++t) {
    const harness::AgentInputs in{testing::random_image({8, 8}, rng),
                                  {Surface::kWebpage, testing::random_words(rng, 6), std::nullopt},
                                  testing::random_words(rng, 4)};
    std::vector<harness::PlannerCall> plain, defended;
    const auto a = harness::run_agent(agent, planner, in, &plain);
    const auto b = harness::run_defended(agent, planner, in, harness::DefenseConfig{}, "Stay {ROLE_NAME}.", &defended);
    identical = identical && a == b && harness::call_log_line("x", plain.at(0)) == harness::call_log_line("x", defended.at(0));
  }
  o.require(identical, "disabled defenses changed the planner call");
  if (o.ok) o.detail = "kernel sum - 1 = " + fmt(sum - 1.0) + ", constant drift " + fmt(worst);
  return o;
}

// ------------------------------------------------------------------------- 8

Outcome metrics_exact() {
  Outcome o;
  using evalkit::TrialRecord;
  using evalkit::Verdict;
  auto rec = [](bool attacked, Verdict v) {
    TrialRecord r;
    r.attacked = attacked;
    r.verdict = v;
    return r;
  };
  const std::vector<TrialRecord> attacked = {rec(true, Verdict::kSuccess), rec(true, Verdict::kFailure),
                                             rec(true, Verdict::kError), rec(true, Verdict::kSuccess),
                                             rec(true, Verdict::kSuccess)};
  const std::vector<TrialRecord> benign = {rec(false, Verdict::kSuccess), rec(false, Verdict::kFailure),
                                           rec(false, Verdict::kSuccess), rec(false, Verdict::kSuccess)};
  o.require(evalkit::compute_asr(attacked) == 3.0 / 5.0, "ASR on the fixture list");
  o.require(evalkit::compute_pna(benign) == 3.0 / 4.0, "PNA on the fixture list");

  std::mt19937_64 rng(8);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + static_cast<int>(rng() % 30);
    std::vector<TrialRecord> pooled;
    std::vector<double> per_rep;
    for (int r = 0; r < 3; ++r) {
      std::vector<TrialRecord> rep;
      for (int i = 0; i < n; ++i) rep.push_back(rec(true, static_cast<Verdict>(rng() % 3)));
      per_rep.push_back(evalkit::compute_asr(rep));
      pooled.insert(pooled.end(), rep.begin(), rep.end());
    }
    worst = std::max(worst, std::abs(evalkit::mean(per_rep) - evalkit::compute_asr(pooled)));
  }
  o.require(worst < 1e-12, "repetition mean differs from pooled by " + fmt(worst));
  if (o.ok) o.detail = "exact fractions, max repetition/pooled gap " + fmt(worst);
  return o;
}

// ------------------------------------------------------------------------- 9, 10

struct SmokeRun {
  int exit_code = -1;
  fs::path dir;
  double seconds = 0.0;
};

SmokeRun smoke_run(const fs::path& out_dir) {
  cli::GlobalOptions opts;
  opts.config = config::fixtures_dir() / "configs" / "smoke.json";
  opts.out = out_dir;
  std::ostringstream out, err;
  const auto t0 = Clock::now();
  const auto r = cli::cmd_run(opts, out, err);
  SmokeRun s;
  s.seconds = seconds_since(t0);
  s.exit_code = r.exit_code;
  if (r.run_dir) s.dir = *r.run_dir;
  if (r.exit_code != cli::kOk) std::fprintf(stderr, "%s", err.str().c_str());
  return s;
}

Outcome end_to_end(const SmokeRun& run) {
  Outcome o;
  o.require(run.exit_code == cli::kOk, "cmd_run exit code " + std::to_string(run.exit_code));
  if (!o.ok) return o;
  const auto report = evalkit::report_from_json(read_text_file(run.dir / "report.json"));
  o.require(!report.cells.empty(), "no cells");
  for (const auto& [key, cell] : report.cells) {
    const std::string name = key.role + "/" + key.surface + "/" + key.dataset;
    o.require(cell.asr_by_attack.at("crossinject") == 1.0, name + " crossinject ASR " +
                                                               fmt(cell.asr_by_attack.at("crossinject").value_or(-1)));
    o.require(cell.asr_by_attack.at("naive") == 0.0,
              name + " naive ASR " + fmt(cell.asr_by_attack.at("naive").value_or(-1)));
  }
  o.require(run.seconds < 60.0, "smoke run took " + fmt(run.seconds) + " s");
  if (o.ok) {
    o.detail = std::to_string(report.cells.size()) + " cells, crossinject 1.0, naive 0.0, " + fmt(run.seconds) + " s";
  }
  return o;
}

Outcome determinism(const SmokeRun& first, const SmokeRun& second) {
  Outcome o;
  o.require(first.exit_code == cli::kOk && second.exit_code == cli::kOk, "a run failed");
  if (!o.ok) return o;
  o.require(first.dir != second.dir, "both runs wrote the same directory");
  for (const char* f : {"trials.jsonl", "calls.jsonl", "bundles.jsonl", "report.json", "report.txt"}) {
    o.require(read_text_file(first.dir / f) == read_text_file(second.dir / f), std::string(f) + " differs");
  }
  if (o.ok) o.detail = "trials, calls, bundles and reports byte-identical";
  return o;
}

}  // namespace

int main() {
  const fs::path out_dir = fs::temp_directory_path() / "crossinject_acceptance";
  fs::remove_all(out_dir);

  struct Criterion {
    const char* name;
    std::function<Outcome()> check;
  };
  SmokeRun first, second;
  const std::vector<Criterion> criteria = {
      {"budget compliance", budget_compliance},
      {"visual loss and gradient oracle", visual_loss_oracle},
      {"zero-loss fixed point", zero_loss_fixed_point},
      {"textual loss oracle", textual_loss_oracle},
      {"GCG exhaustive argmin and monotone traces", gcg_exhaustive},
      {"payload bit-exactness", payload_exactness},
      {"defense math", defense_math},
      {"metrics", metrics_exact},
      {"end-to-end sensitivity", [&] {
         first = smoke_run(out_dir);
         return end_to_end(first);
       }},
      {"determinism", [&] {
         second = smoke_run(out_dir);
         return determinism(first, second);
       }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].check();
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.ok) ++failed;
    std::printf("%s  %2zu %s: %s\n", o.ok ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(out_dir);
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
