#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crossinject/backends/chat.hpp"
#include "crossinject/backends/lm.hpp"
#include "crossinject/core.hpp"

namespace testing {

using crossinject::ImageSize;
using crossinject::ImageTensor;
using crossinject::PixelArray;

inline PixelArray random_pixels(ImageSize size, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  PixelArray p(size.height, size.width);
  for (auto& v : p.values()) v = u(rng);
  return p;
}

inline ImageTensor random_image(ImageSize size, std::mt19937_64& rng) {
  return ImageTensor::from_pixels(random_pixels(size, rng));
}

/// Printable ASCII plus a few multi-byte code points from the mock alphabet.
inline std::string random_text(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                               bool ascii_only = false) {
  static const std::vector<std::string> extra = {"\n", "\t", "\xc3\xa9", "\xce\xb1", "\xd0\x96"};
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> ch(0x20, 0x7E);
  std::uniform_int_distribution<int> pick(0, 9);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (!ascii_only && pick(rng) == 0) {
      s += extra[rng() % extra.size()];
    } else {
      s += static_cast<char>(ch(rng));
    }
  }
  return s;
}

/// Letters only, so no accidental markup or separators.
inline std::string random_words(std::mt19937_64& rng, int words) {
  std::string s;
  for (int w = 0; w < words; ++w) {
    if (w) s += ' ';
    const int n = 2 + static_cast<int>(rng() % 7);
    for (int i = 0; i < n; ++i) s += static_cast<char>('a' + rng() % 26);
  }
  return s;
}

/// Chat backend driven by a callback, counting its calls.
class LambdaChat final : public crossinject::backends::ChatBackend {
 public:
  using Fn = std::function<std::string(const std::string&, std::span<const crossinject::backends::PromptPart>)>;
  LambdaChat(std::string id, crossinject::backends::ChatRole role, Fn fn)
      : ChatBackend(std::move(id), role), fn_(std::move(fn)) {}
  std::string complete(const std::string& system, std::span<const crossinject::backends::PromptPart> parts,
                       int) const override {
    ++calls;
    return fn_(system, parts);
  }
  mutable std::atomic<int> calls{0};

 private:
  Fn fn_;
};

/// Tokenizer over the first n lowercase letters.
inline crossinject::backends::CharTokenizer letter_tokenizer(int n) {
  std::vector<std::string> alphabet;
  for (int i = 0; i < n; ++i) alphabet.push_back(std::string(1, static_cast<char>('a' + i)));
  return crossinject::backends::CharTokenizer(alphabet);
}

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

}  // namespace testing
