#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/emotion.hpp"

namespace empathrl {

enum class Speaker : std::uint8_t { patient, therapist };
enum class Split : std::uint8_t { train, val, test };

std::string_view to_string(Speaker s) noexcept;
std::string_view to_string(Split s) noexcept;
Speaker parse_speaker(std::string_view s);
Split parse_split(std::string_view s);

struct DialogueTurn {
  Speaker speaker = Speaker::patient;
  std::string text;
  Emotion emotion = Emotion::neutral;

  bool operator==(const DialogueTurn&) const = default;
};

struct Dialogue {
  std::string problem_type;
  std::vector<DialogueTurn> turns;
  Split split = Split::train;
};

/// One (problem, user utterance, user emotion) -> (therapist reply, therapist
/// emotion) training pair.
struct DialogueExample {
  std::string problem_type;
  std::string user_text;
  Emotion user_emotion = Emotion::neutral;
  std::string therapist_text;
  Emotion therapist_emotion = Emotion::neutral;

  bool operator==(const DialogueExample&) const = default;
};

void to_json(nlohmann::json& j, const DialogueExample& ex);
void from_json(const nlohmann::json& j, DialogueExample& ex);

/// Removes every sentence that starts with "The speaker" or "The emotion
/// state". Sentences end at '.', '!' or '?' followed by whitespace; the kept
/// sentences are re-joined with single spaces.
std::string strip_metadata(std::string_view raw_text);

/// Concatenates adjacent same-speaker turns with a single space. A merged turn
/// carries the emotion of its last constituent. Throws on empty input.
std::vector<DialogueTurn> merge_consecutive_turns(std::span<const DialogueTurn> turns);

/// One example per patient turn immediately followed by a therapist turn.
std::vector<DialogueExample> build_examples(const Dialogue& dialogue);

/// Maps labels of an external emotion taxonomy onto the seven categories.
class EmotionMapper {
 public:
  EmotionMapper() = default;
  explicit EmotionMapper(std::map<std::string, Emotion, std::less<>> table);

  /// 28-label table for the go_emotions taxonomy.
  static EmotionMapper go_emotions_default();
  /// {"label": "emotion", ...}
  static EmotionMapper from_json(const nlohmann::json& j);
  static EmotionMapper load(const std::filesystem::path& path);

  /// Unmapped labels fall back to neutral and log a warning.
  Emotion map(std::string_view label) const;
  bool contains(std::string_view label) const;
  const std::map<std::string, Emotion, std::less<>>& table() const noexcept { return table_; }

 private:
  std::map<std::string, Emotion, std::less<>> table_;
};

/// Free-function form of EmotionMapper::map over the default table.
Emotion map_external_emotion(std::string_view label);
Emotion map_external_emotion(std::string_view label, const EmotionMapper& mapper);

struct CorpusStats {
  std::size_t n_examples = 0;
  double token_length_mean = 0.0;
  double token_length_median = 0.0;
  std::size_t threshold = 0;
  double coverage_at_threshold = 0.0;
  std::map<Speaker, std::map<Emotion, std::size_t>> emotion_histogram_by_speaker;
};

nlohmann::json to_json(const CorpusStats& stats);

/// Length statistics over unpadded encoded lengths. Throws on empty input.
CorpusStats corpus_stats(std::span<const std::size_t> encoded_lengths, std::size_t threshold);

CorpusStats corpus_stats(std::span<const DialogueExample> examples,
                         const std::function<std::size_t(const DialogueExample&)>& encoded_length,
                         std::size_t threshold);

/// MESC-style corpus: [{"problem_type", "split", "turns": [{"speaker","text","emotion"}]}].
std::vector<Dialogue> parse_mesc(const nlohmann::json& doc);
std::vector<Dialogue> load_mesc(const std::filesystem::path& path);

/// One ESConv conversation; utterance emotions are not annotated in the source.
struct EsconvConversation {
  std::string problem_type;
  std::string situation;
  std::vector<Speaker> speakers;
  std::vector<std::string> utterances;
};

/// The published ESConv layout: [{"problem_type", "situation",
/// "dialog": [{"speaker": "seeker"|"supporter", "content"}]}].
std::vector<EsconvConversation> parse_esconv(const nlohmann::json& doc);
std::vector<EsconvConversation> load_esconv(const std::filesystem::path& path);

struct PreprocessSummary {
  std::size_t dialogues = 0;
  std::size_t examples = 0;
  std::size_t dropped_empty_turns = 0;
  std::size_t dropped_empty_examples = 0;
};

/// strip -> merge -> pair, dropping turns and examples left empty by stripping.
std::vector<DialogueExample> preprocess_dialogue(const Dialogue& dialogue,
                                                 PreprocessSummary* summary = nullptr);

void write_examples_jsonl(const std::filesystem::path& path,
                          std::span<const DialogueExample> examples);
std::vector<DialogueExample> read_examples_jsonl(const std::filesystem::path& path);

}  // namespace empathrl
