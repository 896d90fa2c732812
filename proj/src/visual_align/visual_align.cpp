#include "crossinject/visual_align.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <sstream>

#include "crossinject/spectrum.hpp"

namespace crossinject::visual {

namespace {

constexpr double kDegenerateNorm = 1e-12;

// ---------------------------------------------------------------- text helpers

std::string lower(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

bool is_vowel(char c) { return std::string_view("aeiou").find(c) != std::string_view::npos; }

std::string gerund(const std::string& verb) {
  static const std::map<std::string, std::string> irregular = {
      {"be", "being"},       {"see", "seeing"},       {"lie", "lying"},       {"die", "dying"},
      {"tie", "tying"},      {"begin", "beginning"},  {"admit", "admitting"}, {"commit", "committing"},
      {"submit", "submitting"}, {"refer", "referring"}, {"prefer", "preferring"},
      {"omit", "omitting"},  {"permit", "permitting"}, {"stop", "stopping"},   {"plan", "planning"},
      {"swap", "swapping"},  {"drop", "dropping"},    {"skip", "skipping"},   {"trim", "trimming"}};
  if (auto it = irregular.find(verb); it != irregular.end()) return it->second;
  const auto n = verb.size();
  if (n >= 2 && verb.ends_with("ie")) return verb.substr(0, n - 2) + "ying";
  if (n >= 2 && verb.back() == 'e' && !verb.ends_with("ee") && !verb.ends_with("ye") && !verb.ends_with("oe")) {
    return verb.substr(0, n - 1) + "ing";
  }
  if (n == 3 && !is_vowel(verb[0]) && is_vowel(verb[1]) && !is_vowel(verb[2]) &&
      std::string_view("wxy").find(verb[2]) == std::string_view::npos) {
    return verb + verb.back() + "ing";
  }
  return verb + "ing";
}

std::string third_person(const std::string& word) {
  static const std::map<std::string, std::string> pronouns = {
      {"my", "their"}, {"me", "them"}, {"i", "they"}, {"mine", "theirs"}, {"myself", "themselves"}};
  const auto it = pronouns.find(lower(word));
  return it == pronouns.end() ? word : it->second;
}

bool is_common_verb(const std::string& word) {
  static const std::array<std::string_view, 24> verbs = {
      "say",   "print", "write",  "tell",    "output",  "reply", "respond", "ignore",
      "translate", "summarize", "list", "give", "show", "repeat", "answer", "describe",
      "explain", "send", "visit",  "click",   "open",    "add",   "rewrite", "type"};
  return std::find(verbs.begin(), verbs.end(), word) != verbs.end();
}

bool mentions_artifact(const std::vector<std::string>& words) {
  static const std::array<std::string_view, 16> artifacts = {
      "text", "paragraph", "sentence", "document", "essay", "letter", "email", "review",
      "story", "poem", "article", "passage", "word", "words", "note", "report"};
  for (const auto& w : words) {
    std::string lw = lower(w);
    while (!lw.empty() && !std::isalpha(static_cast<unsigned char>(lw.back()))) lw.pop_back();
    if (lw.ends_with("s") && lw != "words") lw.pop_back();
    for (auto a : artifacts) {
      if (lw == a) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------- numeric helpers

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double mean_abs(const PixelArray& a) {
  double s = 0.0;
  for (double v : a.values()) s += std::abs(v);
  return s / static_cast<double>(a.numel());
}

void add_scaled(PixelArray& acc, const PixelArray& g, double scale) {
  auto a = acc.values();
  const auto b = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

backends::Embedding unit_embedding(const backends::VisionEncoder& enc, const ImageTensor& img) {
  auto e = enc.embed(img);
  const double n = l2(e);
  if (n < kDegenerateNorm) {
    throw DegenerateEmbeddingError("encoder '" + enc.id() + "' produced a zero-norm embedding");
  }
  for (auto& v : e) v /= n;
  return e;
}

struct LossTerm {
  double loss = 0.0;
  std::vector<double> cotangent;  // d loss / d embedding
};

LossTerm loss_term(const backends::VisionEncoder& enc, const ImageTensor& x, std::span<const double> target_unit,
                   FeatureNorm norm, bool want_gradient) {
  const auto e = enc.embed(x);
  const double n = l2(e);
  if (n < kDegenerateNorm) {
    throw DegenerateEmbeddingError("encoder '" + enc.id() + "' produced a zero-norm embedding");
  }
  const std::size_t dim = e.size();
  std::vector<double> u(dim), r(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    u[i] = e[i] / n;
    r[i] = u[i] - target_unit[i];
  }
  LossTerm out;
  std::vector<double> g_u(dim, 0.0);
  if (norm == FeatureNorm::kL2) {
    out.loss = l2(r);
    if (want_gradient && out.loss > 0.0) {
      for (std::size_t i = 0; i < dim; ++i) g_u[i] = r[i] / out.loss;
    }
  } else {
    std::size_t arg = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      if (std::abs(r[i]) > std::abs(r[arg])) arg = i;
    }
    out.loss = std::abs(r[arg]);
    if (want_gradient) g_u[arg] = sign(r[arg]);
  }
  if (want_gradient) {
    // d u / d e = (I - u u^T) / |e|
    const double proj = dot(u, g_u);
    out.cotangent.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) out.cotangent[i] = (g_u[i] - u[i] * proj) / n;
  }
  return out;
}

struct ClampedInput {
  ImageTensor image;
  std::vector<std::uint8_t> pass;  // 1 where clamp(I + delta) is the identity
};

ClampedInput clamp_sum(const ImageTensor& image, const PixelArray& delta) {
  if (image.size() != delta.size()) throw ShapeError("perturbation shape does not match the image");
  PixelArray sum = image.pixels();
  ClampedInput out;
  out.pass.resize(sum.numel());
  auto s = sum.values();
  const auto d = delta.values();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = s[i] + d[i];
    out.pass[i] = (v >= 0.0 && v <= 1.0) ? 1 : 0;
    s[i] = std::clamp(v, 0.0, 1.0);
  }
  out.image = ImageTensor::clamped(std::move(sum));
  return out;
}

std::vector<backends::Embedding> target_units(const EncoderList& encoders, const ImageTensor& target) {
  std::vector<backends::Embedding> out;
  out.reserve(encoders.size());
  for (const auto& enc : encoders) out.push_back(unit_embedding(*enc, target));
  return out;
}

void check_encoders(const EncoderList& encoders, bool need_gradient) {
  if (encoders.empty()) throw ArgumentError("at least one surrogate encoder is required");
  for (const auto& enc : encoders) {
    if (!enc) throw ArgumentError("null encoder in ensemble");
    if (need_gradient && !enc->supports_gradient()) {
      throw CapabilityError("encoder '" + enc->id() + "' does not provide gradients");
    }
  }
}

double ensemble_loss(const ImageTensor& x, const EncoderList& encoders,
                     const std::vector<backends::Embedding>& targets, FeatureNorm norm) {
  double total = 0.0;
  for (std::size_t k = 0; k < encoders.size(); ++k) {
    total += loss_term(*encoders[k], x, targets[k], norm, false).loss;
  }
  return total / static_cast<double>(encoders.size());
}

// Gradient of the mean loss over `encoders` with respect to the encoder input x.
PixelArray input_gradient(const ImageTensor& x, const EncoderList& encoders,
                          const std::vector<backends::Embedding>& targets, FeatureNorm norm) {
  PixelArray acc(x.height(), x.width());
  for (std::size_t k = 0; k < encoders.size(); ++k) {
    const auto term = loss_term(*encoders[k], x, targets[k], norm, true);
    add_scaled(acc, backends::embed_pullback(*encoders[k], x, term.cotangent), 1.0);
  }
  for (auto& v : acc.values()) v /= static_cast<double>(encoders.size());
  return acc;
}

struct Sample {
  ImageTensor image;
  std::optional<PixelArray> spectral_scale;  // absent for the identity sample
  std::vector<std::uint8_t> pass;
};

Sample draw_sample(const ImageTensor& x, const VisualOptConfig& cfg, const SpectrumTransform& dct,
                   std::mt19937_64& rng) {
  if (cfg.ssa_rho == 0.0 && cfg.ssa_sigma == 0.0) return Sample{x, std::nullopt, {}};
  PixelArray noisy = x.pixels();
  if (cfg.ssa_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, cfg.ssa_sigma);
    for (auto& v : noisy.values()) v += gauss(rng);
  }
  PixelArray coeffs = dct.forward(noisy);
  PixelArray scale(x.height(), x.width(), 1.0);
  if (cfg.ssa_rho > 0.0) {
    std::uniform_real_distribution<double> unif(1.0 - cfg.ssa_rho, 1.0 + cfg.ssa_rho);
    for (auto& v : scale.values()) v = unif(rng);
  }
  auto c = coeffs.values();
  const auto s = scale.values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s[i];
  PixelArray out = dct.inverse(coeffs);
  Sample sample;
  sample.pass.resize(out.numel());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    sample.pass[i] = (o[i] >= 0.0 && o[i] <= 1.0) ? 1 : 0;
    o[i] = std::clamp(o[i], 0.0, 1.0);
  }
  sample.image = ImageTensor::clamped(std::move(out));
  sample.spectral_scale = std::move(scale);
  return sample;
}

// Adjoint of draw_sample for fixed noise: IDCT(scale * DCT(g * pass)).
PixelArray sample_backward(const Sample& sample, PixelArray g, const SpectrumTransform& dct) {
  if (!sample.spectral_scale) return g;
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (!sample.pass[i]) gv[i] = 0.0;
  }
  PixelArray coeffs = dct.forward(g);
  auto c = coeffs.values();
  const auto s = sample.spectral_scale->values();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s[i];
  return dct.inverse(coeffs);
}

class SsaGradient {
 public:
  SsaGradient(const ImageTensor& image, const VisualOptConfig& cfg, const EncoderList& encoders,
              const std::vector<backends::Embedding>& targets)
      : image_(image), cfg_(cfg), encoders_(encoders), targets_(targets), dct_(image.size()) {}

  // Mean over SSA samples and the encoder subset [first, last) of d loss / d delta.
  PixelArray operator()(const PixelArray& delta, std::size_t first, std::size_t last,
                        std::mt19937_64& rng) const {
    const auto base = clamp_sum(image_, delta);
    EncoderList subset(encoders_.begin() + static_cast<std::ptrdiff_t>(first),
                       encoders_.begin() + static_cast<std::ptrdiff_t>(last));
    std::vector<backends::Embedding> sub_targets(targets_.begin() + static_cast<std::ptrdiff_t>(first),
                                                 targets_.begin() + static_cast<std::ptrdiff_t>(last));
    PixelArray acc(image_.height(), image_.width());
    for (int s = 0; s < cfg_.ssa_samples; ++s) {
      const Sample sample = draw_sample(base.image, cfg_, dct_, rng);
      add_scaled(acc, sample_backward(sample, input_gradient(sample.image, subset, sub_targets, cfg_.norm), dct_),
                 1.0);
    }
    auto a = acc.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = base.pass[i] ? a[i] / cfg_.ssa_samples : 0.0;
    }
    return acc;
  }

 private:
  const ImageTensor& image_;
  const VisualOptConfig& cfg_;
  const EncoderList& encoders_;
  const std::vector<backends::Embedding>& targets_;
  SpectrumTransform dct_;
};

// Budget ball, mask support, then keep I + delta inside [0, 1].
PixelArray project(PixelArray delta, const ImageTensor& image, const VisualOptConfig& cfg) {
  delta = project_delta(std::move(delta), cfg.budget, cfg.mask);
  auto d = delta.values();
  const auto x = image.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double v = x[i] + d[i];
    if (v > 1.0) d[i] = 1.0 - x[i];
    else if (v < 0.0) d[i] = -x[i];
  }
  return delta;
}

}  // namespace

std::string to_string(FeatureNorm n) { return n == FeatureNorm::kL2 ? "l2" : "linf"; }

FeatureNorm feature_norm_from_string(const std::string& s) {
  if (s == "l2") return FeatureNorm::kL2;
  if (s == "linf") return FeatureNorm::kLinf;
  throw ConfigError("unknown feature norm '" + s + "' (expected l2 or linf)");
}

void VisualOptConfig::check() const {
  if (iterations < 0) throw ConfigError("visual iterations must be >= 0");
  if (!(step_size > 0.0)) throw ConfigError("visual step_size must be > 0");
  if (ssa_samples < 1) throw ConfigError("ssa_samples must be >= 1");
  if (!(ssa_rho >= 0.0 && ssa_rho <= 1.0)) throw ConfigError("ssa_rho must lie in [0, 1]");
  if (!(ssa_sigma >= 0.0)) throw ConfigError("ssa_sigma must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
}

std::string DescriptivePrompt::render() const { return subject + " is " + action + " " + context; }

DescriptivePrompt describe_instruction(const std::string& d) {
  std::string clause = trim(d);
  if (clause.empty()) throw ArgumentError("instruction must be non-empty");
  clause = trim(clause.substr(0, clause.find_first_of(".:;!?\n")));
  auto words = split_words(clause);

  static const std::vector<std::vector<std::string>> lead_ins = {
      {"help", "me", "to"}, {"help", "me"}, {"please"},        {"kindly"},     {"can", "you"},
      {"could", "you"},     {"would", "you"}, {"i", "want", "you", "to"}, {"i", "need", "you", "to"}};
  for (bool stripped = true; stripped && !words.empty();) {
    stripped = false;
    for (const auto& lead : lead_ins) {
      if (words.size() > lead.size() &&
          std::equal(lead.begin(), lead.end(), words.begin(), [](const std::string& a, const std::string& b) {
            return a == lower(b);
          })) {
        words.erase(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(lead.size()));
        stripped = true;
      }
    }
  }

  DescriptivePrompt out{"A person", {}, "on a table"};
  static const std::array<std::string_view, 12> question_words = {
      "what", "which", "who", "how", "why", "when", "where", "is", "are", "does", "do", "can"};
  const std::string first = words.empty() ? std::string() : lower(words.front());
  if (words.empty() ||
      std::find(question_words.begin(), question_words.end(), first) != question_words.end()) {
    out.action = "answering a written question";
    return out;
  }
  std::vector<std::string> rest(words.begin() + 1, words.end());
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const bool coordinated = i > 0 && (lower(rest[i - 1]) == "and" || lower(rest[i - 1]) == "then");
    rest[i] = coordinated && is_common_verb(lower(rest[i])) ? gerund(lower(rest[i])) : third_person(rest[i]);
  }
  out.action = gerund(first);
  if (rest.empty()) {
    out.action += " a text";
    return out;
  }
  for (const auto& w : rest) out.action += " " + w;
  if (!mentions_artifact(rest)) out.action += " of a text";
  return out;
}

MaliciousInstruction reformulate_instruction(MaliciousInstruction instr) {
  if (instr.d.empty()) throw ArgumentError("instruction d must be non-empty");
  const auto prompt = describe_instruction(instr.d);
  if (prompt.subject.empty() || prompt.action.empty() || prompt.context.empty()) {
    throw Error("descriptive prompt has an empty slot");
  }
  instr.d_prime = prompt.render();
  return instr;
}

MaliciousInstruction reformulate_instruction(MaliciousInstruction instr, const backends::ChatBackend& constructor) {
  if (instr.d.empty()) throw ArgumentError("instruction d must be non-empty");
  const std::string system =
      "Rewrite the user's instruction as a text-to-image prompt that names a subject, a context and "
      "an action. Reply with the prompt only.";
  const std::vector<backends::PromptPart> parts = {backends::PromptPart::text_part("instruction", instr.d)};
  std::string reply = trim(backends::chat_complete(constructor, system, parts, 77));
  if (reply.empty()) throw BackendError("constructor '" + constructor.id() + "' returned an empty prompt");
  instr.d_prime = std::move(reply);
  return instr;
}

ImageTensor acquire_target_image(const MaliciousInstruction& instr, const backends::TextToImage& t2i,
                                 std::uint64_t seed) {
  if (!instr.d_prime || instr.d_prime->empty()) {
    throw ArgumentError("instruction has no descriptive prompt; reformulate it first");
  }
  return backends::generate_image(t2i, *instr.d_prime, seed);
}

EncoderList sorted_by_id(EncoderList encoders) {
  std::stable_sort(encoders.begin(), encoders.end(),
                   [](const auto& a, const auto& b) { return a->id() < b->id(); });
  return encoders;
}

double visual_loss(const ImageTensor& image, const PixelArray& delta, const ImageTensor& target,
                   const EncoderList& encoders, FeatureNorm norm) {
  check_encoders(encoders, false);
  const auto x = clamp_sum(image, delta);
  return ensemble_loss(x.image, encoders, target_units(encoders, target), norm);
}

double visual_loss(const ImageTensor& image, const Perturbation& delta, const ImageTensor& target,
                   const EncoderList& encoders, FeatureNorm norm) {
  return visual_loss(image, delta.delta(), target, encoders, norm);
}

PixelArray visual_loss_gradient(const ImageTensor& image, const PixelArray& delta, const ImageTensor& target,
                                const EncoderList& encoders, FeatureNorm norm) {
  check_encoders(encoders, true);
  const auto x = clamp_sum(image, delta);
  PixelArray g = input_gradient(x.image, encoders, target_units(encoders, target), norm);
  auto gv = g.values();
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (!x.pass[i]) gv[i] = 0.0;
  }
  return g;
}

double embedding_cosine(const backends::VisionEncoder& encoder, const ImageTensor& a, const ImageTensor& b) {
  const auto ua = unit_embedding(encoder, a);
  const auto ub = unit_embedding(encoder, b);
  return dot(ua, ub);
}

std::vector<ImageTensor> ssa_augment(const ImageTensor& x, const VisualOptConfig& cfg, std::mt19937_64& rng) {
  cfg.check();
  const SpectrumTransform dct(x.size());
  std::vector<ImageTensor> out;
  out.reserve(static_cast<std::size_t>(cfg.ssa_samples));
  for (int s = 0; s < cfg.ssa_samples; ++s) out.push_back(draw_sample(x, cfg, dct, rng).image);
  return out;
}

OptimizationResult optimize_perturbation(const ImageTensor& image, const ImageTensor& target,
                                         const VisualOptConfig& cfg, const EncoderList& encoders_in,
                                         const TraceSink& sink) {
  cfg.check();
  check_encoders(encoders_in, true);
  if (cfg.mask && (cfg.mask->height() != image.height() || cfg.mask->width() != image.width())) {
    throw ShapeError("perturbation mask does not match the image");
  }
  const EncoderList encoders = sorted_by_id(encoders_in);
  const auto targets = target_units(encoders, target);
  const SsaGradient ssa_gradient(image, cfg, encoders, targets);
  const double inner = cfg.effective_inner_step();
  std::mt19937_64 rng(cfg.seed);

  PixelArray delta(image.height(), image.width());
  PixelArray momentum(image.height(), image.width());

  VisualTrace trace;
  trace.initial_loss = ensemble_loss(clamp_sum(image, delta).image, encoders, targets, cfg.norm);
  trace.best_loss = trace.initial_loss;
  PixelArray best = delta;

  for (int it = 1; it <= cfg.iterations; ++it) {
    PixelArray direction = ssa_gradient(delta, 0, encoders.size(), rng);
    if (inner > 0.0) {
      // Reverse step uphill, then sequential per-encoder descent; the net inner displacement
      // is the update direction.
      PixelArray reversed = delta;
      {
        auto r = reversed.values();
        const auto g = direction.values();
        for (std::size_t i = 0; i < r.size(); ++i) r[i] += inner * sign(g[i]);
      }
      reversed = project(std::move(reversed), image, cfg);
      PixelArray walked = reversed;
      for (std::size_t k = 0; k < encoders.size(); ++k) {
        const PixelArray g = ssa_gradient(walked, k, k + 1, rng);
        const double scale = mean_abs(g);
        if (scale > 0.0) add_scaled(walked, g, -inner / scale);
        walked = project(std::move(walked), image, cfg);
      }
      direction = reversed;
      add_scaled(direction, walked, -1.0);
    }
    const double norm = mean_abs(direction);
    auto m = momentum.values();
    const auto dir = direction.values();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = cfg.momentum * m[i] + (norm > 0.0 ? dir[i] / norm : 0.0);
    }
    auto d = delta.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= cfg.step_size * sign(m[i]);
    delta = project(std::move(delta), image, cfg);

    TraceRecord rec{it, ensemble_loss(clamp_sum(image, delta).image, encoders, targets, cfg.norm), delta.max_abs()};
    trace.records.push_back(rec);
    if (sink) sink(rec);
    if (rec.loss < trace.best_loss) {
      trace.best_loss = rec.loss;
      trace.best_iteration = it;
      best = delta;
    }
  }
  Perturbation result(std::move(best), cfg.budget, cfg.mask);
  trace.best_delta = result;
  return OptimizationResult{std::move(result), std::move(trace)};
}

ImageTensor apply_perturbation(const ImageTensor& image, const Perturbation& p) {
  if (image.size() != p.delta().size()) throw ShapeError("perturbation shape does not match the image");
  return clamp_sum(image, p.delta()).image;
}

Perturbation random_perturbation(ImageSize size, const PixelBudget& budget, const std::optional<PixelMask>& mask,
                                 std::uint64_t seed) {
  PixelArray delta(size.height, size.width);
  const double eps = budget.epsilon_norm();
  if (eps > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, eps);
    for (auto& v : delta.values()) v = gauss(rng);
  }
  return Perturbation(project_delta(std::move(delta), budget, mask), budget, mask);
}

std::string trace_record_line(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["loss"] = r.loss;
  j["linf"] = r.linf;
  return j.dump();
}

}  // namespace crossinject::visual
