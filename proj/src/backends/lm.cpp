#include "crossinject/backends/lm.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace crossinject::backends {

namespace {

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

void check_ids(const SurrogateLM& lm, std::span<const TokenId> tokens, const char* what) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= lm.vocab_size()) {
      throw ArgumentError(std::string(what) + " token id " + std::to_string(t) +
                          " outside vocabulary of size " + std::to_string(lm.vocab_size()));
    }
  }
}

// Token at position q of the sequence context ++ continuation[0, i).
inline TokenId token_at(std::span<const TokenId> context, std::span<const TokenId> continuation,
                        std::ptrdiff_t q) {
  const auto n = static_cast<std::ptrdiff_t>(context.size());
  return q < n ? context[static_cast<std::size_t>(q)] : continuation[static_cast<std::size_t>(q - n)];
}

}  // namespace

std::vector<std::string> utf8_codepoints(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) len = 2;
    else if ((lead & 0xF0) == 0xE0) len = 3;
    else if ((lead & 0xF8) == 0xF0) len = 4;
    if (i + len > text.size()) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

CharTokenizer::CharTokenizer(std::vector<std::string> alphabet, std::optional<std::string> unknown)
    : pieces_(std::move(alphabet)) {
  if (pieces_.empty()) throw ArgumentError("tokenizer alphabet must be non-empty");
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (utf8_codepoints(pieces_[i]).size() != 1) {
      throw ArgumentError("tokenizer pieces must be single code points");
    }
    if (!index_.emplace(pieces_[i], static_cast<TokenId>(i)).second) {
      throw ArgumentError("duplicate tokenizer piece '" + pieces_[i] + "'");
    }
  }
  if (unknown) {
    const auto it = index_.find(*unknown);
    if (it == index_.end()) throw ArgumentError("unknown-token piece is not in the alphabet");
    unknown_ = it->second;
  }
}

const std::string& CharTokenizer::piece(TokenId id) const {
  if (id < 0 || id >= vocab_size()) throw ArgumentError("token id out of range: " + std::to_string(id));
  return pieces_[static_cast<std::size_t>(id)];
}

Tokens CharTokenizer::tokenize(std::string_view text) const {
  Tokens out;
  for (const auto& cp : utf8_codepoints(text)) {
    const auto it = index_.find(cp);
    if (it == index_.end()) throw ArgumentError("character '" + cp + "' is outside the tokenizer alphabet");
    out.push_back(it->second);
  }
  return out;
}

Tokens CharTokenizer::tokenize_lenient(std::string_view text) const {
  if (!unknown_) return tokenize(text);
  Tokens out;
  for (const auto& cp : utf8_codepoints(text)) {
    const auto it = index_.find(cp);
    out.push_back(it == index_.end() ? *unknown_ : it->second);
  }
  return out;
}

std::string CharTokenizer::detokenize(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) out += piece(t);
  return out;
}

bool CharTokenizer::is_printable_ascii(TokenId id) const {
  const auto& p = piece(id);
  return p.size() == 1 && p[0] >= 0x20 && p[0] <= 0x7E;
}

std::vector<std::string> default_mock_alphabet() {
  std::vector<std::string> out;
  for (char32_t c = 0x20; c <= 0x7E; ++c) out.push_back(encode_utf8(c));
  out.push_back("\t");
  out.push_back("\n");
  for (char32_t c = 0xA1; c <= 0xFF; ++c) out.push_back(encode_utf8(c));
  for (char32_t c = 0x391; c <= 0x3A9; ++c) {
    if (c != 0x3A2) out.push_back(encode_utf8(c));
  }
  for (char32_t c = 0x3B1; c <= 0x3C9; ++c) out.push_back(encode_utf8(c));
  for (char32_t c = 0x410; c <= 0x41F; ++c) out.push_back(encode_utf8(c));
  out.push_back(encode_utf8(0xFFFD));
  return out;
}

CharTokenizer default_mock_tokenizer() {
  return CharTokenizer(default_mock_alphabet(), encode_utf8(0xFFFD));
}

Matrix SurrogateLM::onehot_gradient(std::span<const TokenId>, std::size_t, std::size_t,
                                    std::span<const TokenId>) const {
  throw CapabilityError("language model '" + id() + "' does not provide gradients");
}

double lm_logprob(const SurrogateLM& lm, std::span<const TokenId> context,
                  std::span<const TokenId> continuation) {
  if (continuation.empty()) throw ArgumentError("continuation must be non-empty");
  check_ids(lm, context, "context");
  check_ids(lm, continuation, "continuation");
  return lm.continuation_logprob(context, continuation);
}

double SurrogateLM::continuation_logprob(std::span<const TokenId> context,
                                         std::span<const TokenId> continuation) const {
  Tokens seq(context.begin(), context.end());
  seq.reserve(context.size() + continuation.size());
  double total = 0.0;
  for (TokenId t : continuation) {
    total += next_logprob(seq, t);
    seq.push_back(t);
  }
  return total;
}

Matrix lm_onehot_gradient(const SurrogateLM& lm, std::span<const TokenId> context,
                          std::size_t span_begin, std::size_t span_len,
                          std::span<const TokenId> continuation) {
  if (!lm.supports_gradient()) {
    throw CapabilityError("language model '" + lm.id() + "' does not provide gradients");
  }
  if (span_begin + span_len > context.size()) {
    throw ArgumentError("optimizable span lies outside the context");
  }
  if (continuation.empty()) throw ArgumentError("continuation must be non-empty");
  check_ids(lm, context, "context");
  check_ids(lm, continuation, "continuation");
  if (span_len == 0) return Matrix(0, static_cast<std::size_t>(lm.vocab_size()));
  return lm.onehot_gradient(context, span_begin, span_len, continuation);
}

WindowMixtureLM::WindowMixtureLM(std::string id, CharTokenizer tokenizer, std::vector<double> weights,
                                 std::vector<Matrix> tables)
    : SurrogateLM(std::move(id), std::move(tokenizer)),
      weights_(std::move(weights)),
      tables_(std::move(tables)) {
  const auto v = static_cast<std::size_t>(vocab_size());
  if (weights_.empty() || weights_.size() != tables_.size()) {
    throw ArgumentError("mixture needs one weight per table and at least one table");
  }
  const double wsum = std::accumulate(weights_.begin(), weights_.end(), 0.0);
  if (std::abs(wsum - 1.0) > 1e-9) throw ArgumentError("mixture weights must sum to one");
  for (const auto& t : tables_) {
    if (t.rows != v + 1 || t.cols != v) throw ShapeError("mixture table must be (V+1) x V");
    for (std::size_t r = 0; r < t.rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < t.cols; ++c) {
        if (t(r, c) < 0.0) throw ArgumentError("mixture table has a negative probability");
        s += t(r, c);
      }
      if (std::abs(s - 1.0) > 1e-9) throw ArgumentError("mixture table rows must sum to one");
    }
  }
}

std::shared_ptr<WindowMixtureLM> WindowMixtureLM::random(std::string id, CharTokenizer tokenizer,
                                                         int window, std::uint64_t seed,
                                                         double sharpness) {
  if (window < 1) throw ArgumentError("window must be >= 1");
  const auto v = static_cast<std::size_t>(tokenizer.vocab_size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Matrix> tables;
  for (int j = 0; j < window; ++j) {
    Matrix t(v + 1, v);
    for (std::size_t r = 0; r <= v; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < v; ++c) s += (t(r, c) = std::exp(sharpness * gauss(rng)));
      for (std::size_t c = 0; c < v; ++c) t(r, c) /= s;
    }
    tables.push_back(std::move(t));
  }
  // Positions closer to the prediction point weigh more.
  std::vector<double> weights(static_cast<std::size_t>(window));
  const double norm = window * (window + 1) / 2.0;
  for (int j = 0; j < window; ++j) weights[static_cast<std::size_t>(j)] = (j + 1) / norm;
  return std::make_shared<WindowMixtureLM>(std::move(id), std::move(tokenizer), std::move(weights),
                                           std::move(tables));
}

double WindowMixtureLM::next_prob(std::span<const TokenId> context, TokenId next) const {
  const auto n = static_cast<std::ptrdiff_t>(context.size());
  const auto bos = static_cast<std::size_t>(vocab_size());
  const int L = window();
  double p = 0.0;
  for (int j = 0; j < L; ++j) {
    const std::ptrdiff_t q = n - L + j;
    const std::size_t row = q < 0 ? bos : static_cast<std::size_t>(context[static_cast<std::size_t>(q)]);
    p += weights_[static_cast<std::size_t>(j)] * tables_[static_cast<std::size_t>(j)](row, static_cast<std::size_t>(next));
  }
  return p;
}

double WindowMixtureLM::next_logprob(std::span<const TokenId> context, TokenId next) const {
  return std::log(next_prob(context, next));
}

Matrix WindowMixtureLM::onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                                        std::size_t span_len,
                                        std::span<const TokenId> continuation) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  const auto n = static_cast<std::ptrdiff_t>(context.size());
  const auto bos = v;
  const int L = window();
  Matrix grad(span_len, v);
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::ptrdiff_t len = n + static_cast<std::ptrdiff_t>(i);
    const auto y = static_cast<std::size_t>(continuation[i]);
    double p = 0.0;
    for (int j = 0; j < L; ++j) {
      const std::ptrdiff_t q = len - L + j;
      const std::size_t row = q < 0 ? bos : static_cast<std::size_t>(token_at(context, continuation, q));
      p += weights_[static_cast<std::size_t>(j)] * tables_[static_cast<std::size_t>(j)](row, y);
    }
    for (int j = 0; j < L; ++j) {
      const std::ptrdiff_t q = len - L + j;
      if (q < static_cast<std::ptrdiff_t>(span_begin) ||
          q >= static_cast<std::ptrdiff_t>(span_begin + span_len)) {
        continue;
      }
      const auto r = static_cast<std::size_t>(q) - span_begin;
      const double scale = -weights_[static_cast<std::size_t>(j)] / p;
      const Matrix& t = tables_[static_cast<std::size_t>(j)];
      for (std::size_t tok = 0; tok < v; ++tok) grad(r, tok) += scale * t(tok, y);
    }
  }
  return grad;
}

TinyBigramLM::TinyBigramLM(std::string id, CharTokenizer tokenizer, Matrix table)
    : WindowMixtureLM(std::move(id), std::move(tokenizer), {1.0}, {std::move(table)}) {}

std::shared_ptr<TinyBigramLM> TinyBigramLM::random(std::string id, CharTokenizer tokenizer,
                                                   std::uint64_t seed, double sharpness) {
  auto base = WindowMixtureLM::random(id, tokenizer, 1, seed, sharpness);
  return std::make_shared<TinyBigramLM>(std::move(id), std::move(tokenizer), base->table(0));
}

double UniformLM::next_logprob(std::span<const TokenId>, TokenId) const {
  return -std::log(static_cast<double>(vocab_size()));
}

double UniformLM::continuation_logprob(std::span<const TokenId>, std::span<const TokenId> continuation) const {
  return -static_cast<double>(continuation.size()) * std::log(static_cast<double>(vocab_size()));
}

Matrix UniformLM::onehot_gradient(std::span<const TokenId>, std::size_t, std::size_t span_len,
                                  std::span<const TokenId>) const {
  return Matrix(span_len, static_cast<std::size_t>(vocab_size()));
}

DeterministicLM::DeterministicLM(std::string id, CharTokenizer tokenizer, std::vector<TokenId> successor,
                                 TokenId first)
    : SurrogateLM(std::move(id), std::move(tokenizer)), successor_(std::move(successor)), first_(first) {
  if (successor_.size() != static_cast<std::size_t>(vocab_size())) {
    throw ArgumentError("successor map must cover the whole vocabulary");
  }
}

std::shared_ptr<DeterministicLM> DeterministicLM::following(std::string id, CharTokenizer tokenizer,
                                                            const Tokens& sequence) {
  if (sequence.empty()) throw ArgumentError("sequence must be non-empty");
  std::vector<TokenId> succ(static_cast<std::size_t>(tokenizer.vocab_size()), sequence.front());
  for (std::size_t i = 0; i + 1 < sequence.size(); ++i) {
    succ[static_cast<std::size_t>(sequence[i])] = sequence[i + 1];
  }
  return std::make_shared<DeterministicLM>(std::move(id), std::move(tokenizer), std::move(succ),
                                           sequence.front());
}

double DeterministicLM::next_logprob(std::span<const TokenId> context, TokenId next) const {
  const TokenId expected = context.empty() ? first_ : successor_[static_cast<std::size_t>(context.back())];
  return expected == next ? 0.0 : -std::numeric_limits<double>::infinity();
}

LinearNllLM::LinearNllLM(std::string id, CharTokenizer tokenizer, Matrix coefficients, TokenId favored)
    : SurrogateLM(std::move(id), std::move(tokenizer)),
      coefficients_(std::move(coefficients)),
      favored_(favored) {
  if (coefficients_.rows == 0 || coefficients_.cols != static_cast<std::size_t>(vocab_size())) {
    throw ShapeError("coefficient matrix must be window x V");
  }
  for (double w : coefficients_.data) {
    if (!(w >= 0.0)) throw ArgumentError("coefficients must be non-negative");
  }
  if (favored < 0 || favored >= vocab_size()) throw ArgumentError("favored token out of range");
}

double LinearNllLM::energy(std::span<const TokenId> context) const {
  const auto n = static_cast<std::ptrdiff_t>(context.size());
  const int L = window();
  double s = 0.0;
  for (int j = 0; j < L; ++j) {
    const std::ptrdiff_t q = n - L + j;
    if (q >= 0) s += coefficients_(static_cast<std::size_t>(j), static_cast<std::size_t>(context[static_cast<std::size_t>(q)]));
  }
  return s;
}

double LinearNllLM::next_logprob(std::span<const TokenId> context, TokenId next) const {
  const double s = energy(context);
  if (next == favored_) return -s;
  return std::log(-std::expm1(-s)) - std::log(static_cast<double>(vocab_size() - 1));
}

Matrix LinearNllLM::onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                                    std::size_t span_len, std::span<const TokenId> continuation) const {
  const auto v = static_cast<std::size_t>(vocab_size());
  const auto n = static_cast<std::ptrdiff_t>(context.size());
  const int L = window();
  Matrix grad(span_len, v);
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::ptrdiff_t len = n + static_cast<std::ptrdiff_t>(i);
    double dnll_ds = 1.0;
    if (continuation[i] != favored_) {
      double s = 0.0;
      for (int j = 0; j < L; ++j) {
        const std::ptrdiff_t q = len - L + j;
        if (q >= 0) s += coefficients_(static_cast<std::size_t>(j), static_cast<std::size_t>(token_at(context, continuation, q)));
      }
      dnll_ds = -std::exp(-s) / -std::expm1(-s);
    }
    for (int j = 0; j < L; ++j) {
      const std::ptrdiff_t q = len - L + j;
      if (q < static_cast<std::ptrdiff_t>(span_begin) ||
          q >= static_cast<std::ptrdiff_t>(span_begin + span_len)) {
        continue;
      }
      const auto r = static_cast<std::size_t>(q) - span_begin;
      for (std::size_t tok = 0; tok < v; ++tok) grad(r, tok) += dnll_ds * coefficients_(static_cast<std::size_t>(j), tok);
    }
  }
  return grad;
}

}  // namespace crossinject::backends
