#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crossinject/errors.hpp"

namespace crossinject::backends {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Splits UTF-8 text into code points.
std::vector<std::string> utf8_codepoints(std::string_view text);

/// One token per Unicode code point of a declared alphabet. detokenize(tokenize(s)) == s
/// for every s over the alphabet.
class CharTokenizer {
 public:
  /// `unknown` names an alphabet entry used for out-of-alphabet code points in lenient mode.
  explicit CharTokenizer(std::vector<std::string> alphabet, std::optional<std::string> unknown = std::nullopt);

  int vocab_size() const { return static_cast<int>(pieces_.size()); }
  const std::string& piece(TokenId id) const;

  /// Strict: throws ArgumentError on out-of-alphabet code points.
  Tokens tokenize(std::string_view text) const;
  /// Maps out-of-alphabet code points to the unknown token (strict if none is declared).
  Tokens tokenize_lenient(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> tokens) const;

  /// Printable ASCII, i.e. U+0020..U+007E.
  bool is_printable_ascii(TokenId id) const;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  std::optional<TokenId> unknown_;
};

/// 258-symbol alphabet: printable ASCII, tab, newline, Latin-1, Greek, Cyrillic and U+FFFD.
std::vector<std::string> default_mock_alphabet();
CharTokenizer default_mock_tokenizer();

/// Surrogate language model p(. | .). Implementations must be safe for concurrent calls.
class SurrogateLM {
 public:
  SurrogateLM(std::string id, CharTokenizer tokenizer)
      : id_(std::move(id)), tokenizer_(std::move(tokenizer)) {}
  virtual ~SurrogateLM() = default;

  const std::string& id() const { return id_; }
  int vocab_size() const { return tokenizer_.vocab_size(); }
  const CharTokenizer& tokenizer() const { return tokenizer_; }

  /// log p(next | context).
  virtual double next_logprob(std::span<const TokenId> context, TokenId next) const = 0;

  /// log p(continuation | context). Defaults to the per-token chain-rule sum; ids are
  /// already validated.
  virtual double continuation_logprob(std::span<const TokenId> context, std::span<const TokenId> continuation) const;

  virtual bool supports_gradient() const { return false; }

  /// Gradient of -log p(continuation | context) with respect to the one-hot indicators of
  /// context[span_begin, span_begin + span_len). Inputs are already validated.
  virtual Matrix onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                                 std::size_t span_len, std::span<const TokenId> continuation) const;

 private:
  std::string id_;
  CharTokenizer tokenizer_;
};

using LMPtr = std::shared_ptr<const SurrogateLM>;

/// Sum of per-token conditional log probabilities of `continuation`.
double lm_logprob(const SurrogateLM& lm, std::span<const TokenId> context,
                  std::span<const TokenId> continuation);

Matrix lm_onehot_gradient(const SurrogateLM& lm, std::span<const TokenId> context,
                          std::size_t span_begin, std::size_t span_len,
                          std::span<const TokenId> continuation);

/// p(y | ctx) = sum_j weight_j * table_j[ctx[n - window + j]][y]. Rows indexed by vocab_size
/// stand for positions before the start of the context. Differentiable in the one-hot
/// relaxation because p is linear in the indicators.
class WindowMixtureLM : public SurrogateLM {
 public:
  /// `tables` holds `window` row-stochastic (V+1) x V matrices; `weights` sums to one.
  WindowMixtureLM(std::string id, CharTokenizer tokenizer, std::vector<double> weights,
                  std::vector<Matrix> tables);

  /// Random Dirichlet-like tables; larger `sharpness` concentrates mass.
  static std::shared_ptr<WindowMixtureLM> random(std::string id, CharTokenizer tokenizer,
                                                 int window, std::uint64_t seed, double sharpness = 2.0);

  int window() const { return static_cast<int>(weights_.size()); }
  const std::vector<double>& weights() const { return weights_; }
  const Matrix& table(int j) const { return tables_[static_cast<std::size_t>(j)]; }
  /// p(next | context) as an explicit mixture.
  double next_prob(std::span<const TokenId> context, TokenId next) const;

  double next_logprob(std::span<const TokenId> context, TokenId next) const override;
  bool supports_gradient() const override { return true; }
  Matrix onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                         std::size_t span_len, std::span<const TokenId> continuation) const override;

 private:
  std::vector<double> weights_;
  std::vector<Matrix> tables_;
};

/// First-order model with an explicit probability table (the window-1 mixture).
class TinyBigramLM final : public WindowMixtureLM {
 public:
  /// `table` is (V+1) x V; row V is the start-of-context distribution.
  TinyBigramLM(std::string id, CharTokenizer tokenizer, Matrix table);
  static std::shared_ptr<TinyBigramLM> random(std::string id, CharTokenizer tokenizer,
                                              std::uint64_t seed, double sharpness = 2.0);
};

/// p(y | ctx) = 1 / V for every y.
class UniformLM final : public SurrogateLM {
 public:
  using SurrogateLM::SurrogateLM;
  double next_logprob(std::span<const TokenId>, TokenId) const override;
  /// Closed form: -n log V.
  double continuation_logprob(std::span<const TokenId>, std::span<const TokenId> continuation) const override;
  bool supports_gradient() const override { return true; }
  Matrix onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                         std::size_t span_len, std::span<const TokenId> continuation) const override;
};

/// Puts probability one on successor[last token]; start-of-context uses `first`.
/// Gradient-free.
class DeterministicLM final : public SurrogateLM {
 public:
  DeterministicLM(std::string id, CharTokenizer tokenizer, std::vector<TokenId> successor, TokenId first);
  /// Successor map that walks `sequence` in order, wrapping around.
  static std::shared_ptr<DeterministicLM> following(std::string id, CharTokenizer tokenizer,
                                                    const Tokens& sequence);
  double next_logprob(std::span<const TokenId> context, TokenId next) const override;

 private:
  std::vector<TokenId> successor_;
  TokenId first_;
};

/// The favored token has p = exp(-sum_j W[j][ctx[n - window + j]]); the rest share the
/// remaining mass uniformly. The NLL of the favored token is therefore linear in the one-hot
/// context indicators with coefficient matrix W, and its minimizer is the per-position argmin.
class LinearNllLM final : public SurrogateLM {
 public:
  LinearNllLM(std::string id, CharTokenizer tokenizer, Matrix coefficients, TokenId favored);

  const Matrix& coefficients() const { return coefficients_; }
  TokenId favored() const { return favored_; }
  int window() const { return static_cast<int>(coefficients_.rows); }

  double next_logprob(std::span<const TokenId> context, TokenId next) const override;
  bool supports_gradient() const override { return true; }
  Matrix onehot_gradient(std::span<const TokenId> context, std::size_t span_begin,
                         std::size_t span_len, std::span<const TokenId> continuation) const override;

 private:
  double energy(std::span<const TokenId> context) const;
  Matrix coefficients_;
  TokenId favored_;
};

}  // namespace crossinject::backends
