#pragma once

// Shared fixtures: synthetic dialogue corpora and tiny checkpoints.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "empathrl/checkpoint.hpp"
#include "empathrl/corpus.hpp"
#include "empathrl/encoding.hpp"
#include "empathrl/random.hpp"

namespace toy {

using namespace empathrl;

/// Templated pairs where the therapist emotion follows from the user emotion,
/// so a small model can memorize the mapping.
inline std::vector<DialogueExample> synthetic_corpus(std::size_t n, std::uint64_t seed) {
  static const std::array<const char*, 5> problems = {"anxiety", "grief", "work", "sleep", "family"};
  struct Row {
    Emotion user;
    const char* text;
    const char* reply;
    Emotion therapist;
  };
  static const std::array<Row, 7> rows = {{
      {Emotion::sadness, "i feel so sad today", "that sounds painful, i am here with you", Emotion::sadness},
      {Emotion::fear, "i am scared about tomorrow", "it is okay to feel afraid, tell me more", Emotion::neutral},
      {Emotion::joy, "i finally got the job", "that is wonderful news, well done", Emotion::joy},
      {Emotion::anger, "he never listens to me", "that sounds frustrating, what happened", Emotion::neutral},
      {Emotion::neutral, "work was fine this week", "what would you like to talk about", Emotion::neutral},
      {Emotion::depression, "nothing feels worth it", "i hear how heavy this feels for you", Emotion::sadness},
      {Emotion::disgust, "i hate how i acted", "you can be kind to yourself here", Emotion::joy},
  }};
  Rng rng(seed);
  std::vector<DialogueExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rows[i % rows.size()];
    const char* problem = problems[rng.below(problems.size())];
    out.push_back(DialogueExample{problem, r.text, r.user, r.reply, r.therapist});
  }
  return out;
}

inline std::vector<std::string> corpus_texts(const std::vector<DialogueExample>& rows) {
  std::vector<std::string> texts;
  for (const auto& ex : rows) {
    texts.push_back(ex.problem_type);
    texts.push_back(ex.user_text);
    texts.push_back(ex.therapist_text);
  }
  return texts;
}

inline GptConfig tiny_shape(std::size_t layers = 2, std::size_t d_model = 64, std::size_t heads = 2) {
  GptConfig c;
  c.context_window = 128;
  c.n_layer = layers;
  c.n_head = heads;
  c.d_model = d_model;
  return c;
}

/// Byte-level BPE learned on the corpus, extended vocabulary, fresh model.
inline Checkpoint make_checkpoint(const std::vector<DialogueExample>& rows, GptConfig shape,
                                  std::size_t merges = 200, std::uint64_t seed = 1) {
  auto base = std::make_shared<ByteLevelBpe>(ByteLevelBpe::train(corpus_texts(rows), merges));
  auto tok = ExtendedTokenizer::extend(base);
  shape.vocab_size = tok.total_vocab_size();
  return Checkpoint{GptModel(shape, seed), std::move(tok), nlohmann::json::object()};
}

inline std::vector<EncodedExample> encode_rows(const ExtendedTokenizer& tok,
                                               const std::vector<DialogueExample>& rows,
                                               bool with_emotion, std::size_t max_len = 128) {
  std::vector<EncodedExample> out;
  for (const auto& ex : rows) {
    if (auto e = encode_example(tok, ex, with_emotion, max_len)) out.push_back(std::move(*e));
  }
  return out;
}

}  // namespace toy
