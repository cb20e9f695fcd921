#pragma once

// Hand-rolled generators for property tests. Every generator draws from an
// explicit Rng so failures replay from the printed seed.

#include <array>
#include <string>
#include <vector>

#include "empathrl/emotion.hpp"
#include "empathrl/random.hpp"

namespace gen {

using empathrl::Rng;

inline std::size_t size(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline double real(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

template <typename T, std::size_t N>
const T& pick(Rng& rng, const std::array<T, N>& items) {
  return items[rng.below(N)];
}

inline empathrl::Emotion emotion(Rng& rng) { return pick(rng, empathrl::kAllEmotions); }

inline const std::array<const char*, 24> kWords = {
    "i",     "you",   "feel",  "sad",    "the",   "cat",   "sat",   "on",
    "mat",   "work",  "sleep", "tired",  "happy", "glad",  "help",  "talk",
    "today", "night", "fear",  "family", "hard",  "okay",  "more",  "why",
};

inline std::vector<std::string> words(Rng& rng, std::size_t lo, std::size_t hi) {
  std::vector<std::string> out(size(rng, lo, hi));
  for (auto& w : out) w = kWords[rng.below(kWords.size())];
  return out;
}

inline std::string sentence(Rng& rng, std::size_t lo = 1, std::size_t hi = 8) {
  std::string s;
  for (const auto& w : words(rng, lo, hi)) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

/// Free text built from words, punctuation, whitespace and metadata openers.
inline std::string messy_text(Rng& rng) {
  static const std::array<const char*, 12> pieces = {
      "The speaker", "The emotion state", " is calm", "hello", "I feel lost",
      ".",           "!",                 "?",        " ",     "\n",
      "  ",          "the speaker"};
  std::string s;
  const std::size_t n = size(rng, 0, 14);
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.below(pieces.size())];
  return s;
}

}  // namespace gen
