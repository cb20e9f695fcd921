#include "empathrl/corpus.hpp"

#include <algorithm>
#include <fstream>

#include <spdlog/spdlog.h>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

std::string_view to_string(Speaker s) noexcept {
  return s == Speaker::patient ? "patient" : "therapist";
}

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      break;
  }
  return "test";
}

Speaker parse_speaker(std::string_view s) {
  if (s == "patient") return Speaker::patient;
  if (s == "therapist") return Speaker::therapist;
  throw ParseError("unknown speaker '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "valid" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

void to_json(json& j, const DialogueExample& ex) {
  j = json{{"problem_type", ex.problem_type},
           {"user_text", ex.user_text},
           {"user_emotion", to_string(ex.user_emotion)},
           {"therapist_text", ex.therapist_text},
           {"therapist_emotion", to_string(ex.therapist_emotion)}};
}

void from_json(const json& j, DialogueExample& ex) {
  ex.problem_type = j.at("problem_type").get<std::string>();
  ex.user_text = j.at("user_text").get<std::string>();
  ex.user_emotion = parse_emotion(j.at("user_emotion").get<std::string>());
  ex.therapist_text = j.at("therapist_text").get<std::string>();
  ex.therapist_emotion = parse_emotion(j.at("therapist_emotion").get<std::string>());
}

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_sentences(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() && is_space(text[i + 1])) {
      auto sentence = trim(text.substr(start, i + 1 - start));
      if (!sentence.empty()) out.push_back(sentence);
      start = i + 1;
    }
  }
  auto tail = trim(text.substr(std::min(start, text.size())));
  if (!tail.empty()) out.push_back(tail);
  return out;
}

bool is_metadata_sentence(std::string_view sentence) {
  return sentence.starts_with("The speaker") || sentence.starts_with("The emotion state");
}

}  // namespace

std::string strip_metadata(std::string_view raw_text) {
  std::string out;
  for (auto sentence : split_sentences(raw_text)) {
    if (is_metadata_sentence(sentence)) continue;
    if (!out.empty()) out += ' ';
    out.append(sentence);
  }
  return out;
}

std::vector<DialogueTurn> merge_consecutive_turns(std::span<const DialogueTurn> turns) {
  if (turns.empty()) throw InvalidArgument("merge_consecutive_turns: empty turn list");
  std::vector<DialogueTurn> merged;
  merged.reserve(turns.size());
  for (const auto& turn : turns) {
    if (!merged.empty() && merged.back().speaker == turn.speaker) {
      auto& last = merged.back();
      last.text += ' ';
      last.text += turn.text;
      last.emotion = turn.emotion;
    } else {
      merged.push_back(turn);
    }
  }
  return merged;
}

std::vector<DialogueExample> build_examples(const Dialogue& dialogue) {
  std::vector<DialogueExample> out;
  const auto& turns = dialogue.turns;
  for (std::size_t i = 0; i + 1 < turns.size(); ++i) {
    if (turns[i].speaker != Speaker::patient || turns[i + 1].speaker != Speaker::therapist) continue;
    out.push_back(DialogueExample{dialogue.problem_type, turns[i].text, turns[i].emotion,
                                  turns[i + 1].text, turns[i + 1].emotion});
  }
  return out;
}

// ---------------------------------------------------------------------------
// External emotion mapping

EmotionMapper::EmotionMapper(std::map<std::string, Emotion, std::less<>> table)
    : table_(std::move(table)) {}

EmotionMapper EmotionMapper::go_emotions_default() {
  std::map<std::string, Emotion, std::less<>> t;
  for (const char* label : {"admiration", "amusement", "approval", "caring", "desire",
                            "excitement", "gratitude", "joy", "love", "optimism", "pride",
                            "relief"}) {
    t.emplace(label, Emotion::joy);
  }
  t.emplace("sadness", Emotion::sadness);
  t.emplace("grief", Emotion::sadness);
  t.emplace("disappointment", Emotion::sadness);
  t.emplace("embarrassment", Emotion::sadness);
  t.emplace("remorse", Emotion::depression);
  t.emplace("anger", Emotion::anger);
  t.emplace("annoyance", Emotion::anger);
  t.emplace("disapproval", Emotion::anger);
  t.emplace("disgust", Emotion::disgust);
  t.emplace("fear", Emotion::fear);
  t.emplace("nervousness", Emotion::fear);
  for (const char* label : {"confusion", "curiosity", "realization", "surprise", "neutral"}) {
    t.emplace(label, Emotion::neutral);
  }
  return EmotionMapper(std::move(t));
}

EmotionMapper EmotionMapper::from_json(const json& j) {
  if (!j.is_object()) throw ParseError("emotion mapping must be a JSON object");
  std::map<std::string, Emotion, std::less<>> t;
  for (const auto& [label, target] : j.items()) {
    t.emplace(label, parse_emotion(target.get<std::string>()));
  }
  return EmotionMapper(std::move(t));
}

EmotionMapper EmotionMapper::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open emotion mapping " + path.string());
  return from_json(json::parse(in));
}

Emotion EmotionMapper::map(std::string_view label) const {
  if (auto it = table_.find(label); it != table_.end()) return it->second;
  spdlog::warn("unmapped external emotion label '{}', using neutral", label);
  return Emotion::neutral;
}

bool EmotionMapper::contains(std::string_view label) const {
  return table_.find(label) != table_.end();
}

Emotion map_external_emotion(std::string_view label) {
  static const EmotionMapper mapper = EmotionMapper::go_emotions_default();
  return mapper.map(label);
}

Emotion map_external_emotion(std::string_view label, const EmotionMapper& mapper) {
  return mapper.map(label);
}

// ---------------------------------------------------------------------------
// Statistics

json to_json(const CorpusStats& stats) {
  json hist = json::object();
  for (const auto& [speaker, counts] : stats.emotion_histogram_by_speaker) {
    json row = json::object();
    for (auto e : kAllEmotions) {
      auto it = counts.find(e);
      row[std::string(to_string(e))] = it == counts.end() ? 0 : it->second;
    }
    hist[std::string(to_string(speaker))] = row;
  }
  return json{{"n_examples", stats.n_examples},
              {"token_length_mean", stats.token_length_mean},
              {"token_length_median", stats.token_length_median},
              {"threshold", stats.threshold},
              {"coverage_at_threshold", stats.coverage_at_threshold},
              {"emotion_histogram_by_speaker", hist}};
}

CorpusStats corpus_stats(std::span<const std::size_t> encoded_lengths, std::size_t threshold) {
  if (encoded_lengths.empty()) throw InvalidArgument("corpus_stats: no examples");
  CorpusStats stats;
  stats.n_examples = encoded_lengths.size();
  stats.threshold = threshold;

  std::vector<std::size_t> sorted(encoded_lengths.begin(), encoded_lengths.end());
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  std::size_t covered = 0;
  for (auto len : sorted) {
    sum += static_cast<double>(len);
    if (len <= threshold) ++covered;
  }
  const std::size_t n = sorted.size();
  stats.token_length_mean = sum / static_cast<double>(n);
  stats.token_length_median =
      n % 2 == 1 ? static_cast<double>(sorted[n / 2])
                 : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
  stats.coverage_at_threshold = static_cast<double>(covered) / static_cast<double>(n);
  return stats;
}

CorpusStats corpus_stats(std::span<const DialogueExample> examples,
                         const std::function<std::size_t(const DialogueExample&)>& encoded_length,
                         std::size_t threshold) {
  std::vector<std::size_t> lengths;
  lengths.reserve(examples.size());
  for (const auto& ex : examples) lengths.push_back(encoded_length(ex));
  CorpusStats stats = corpus_stats(lengths, threshold);
  for (const auto& ex : examples) {
    ++stats.emotion_histogram_by_speaker[Speaker::patient][ex.user_emotion];
    ++stats.emotion_histogram_by_speaker[Speaker::therapist][ex.therapist_emotion];
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<Dialogue> parse_mesc(const json& doc) {
  if (!doc.is_array()) throw ParseError("MESC corpus must be a JSON array of dialogues");
  std::vector<Dialogue> out;
  out.reserve(doc.size());
  for (const auto& d : doc) {
    Dialogue dialogue;
    dialogue.problem_type = d.at("problem_type").get<std::string>();
    dialogue.split = parse_split(d.value("split", std::string("train")));
    for (const auto& t : d.at("turns")) {
      dialogue.turns.push_back(DialogueTurn{parse_speaker(t.at("speaker").get<std::string>()),
                                            t.at("text").get<std::string>(),
                                            parse_emotion(t.at("emotion").get<std::string>())});
    }
    out.push_back(std::move(dialogue));
  }
  return out;
}

std::vector<Dialogue> load_mesc(const std::filesystem::path& path) {
  return parse_mesc(read_json_file(path));
}

std::vector<EsconvConversation> parse_esconv(const json& doc) {
  if (!doc.is_array()) throw ParseError("ESConv corpus must be a JSON array of conversations");
  std::vector<EsconvConversation> out;
  out.reserve(doc.size());
  for (const auto& c : doc) {
    EsconvConversation conv;
    conv.problem_type = c.value("problem_type", std::string());
    conv.situation = c.value("situation", std::string());
    for (const auto& turn : c.at("dialog")) {
      const auto speaker = turn.at("speaker").get<std::string>();
      if (speaker == "seeker" || speaker == "usr") {
        conv.speakers.push_back(Speaker::patient);
      } else if (speaker == "supporter" || speaker == "sys") {
        conv.speakers.push_back(Speaker::therapist);
      } else {
        throw ParseError("unknown ESConv speaker '" + speaker + "'");
      }
      conv.utterances.push_back(turn.at("content").get<std::string>());
    }
    out.push_back(std::move(conv));
  }
  return out;
}

std::vector<EsconvConversation> load_esconv(const std::filesystem::path& path) {
  return parse_esconv(read_json_file(path));
}

std::vector<DialogueExample> preprocess_dialogue(const Dialogue& dialogue,
                                                 PreprocessSummary* summary) {
  std::vector<DialogueTurn> cleaned;
  cleaned.reserve(dialogue.turns.size());
  std::size_t dropped_turns = 0;
  for (const auto& turn : dialogue.turns) {
    auto text = strip_metadata(turn.text);
    if (text.empty()) {
      ++dropped_turns;
      continue;
    }
    cleaned.push_back(DialogueTurn{turn.speaker, std::move(text), turn.emotion});
  }

  std::vector<DialogueExample> examples;
  std::size_t dropped_examples = 0;
  if (!cleaned.empty()) {
    Dialogue merged{dialogue.problem_type, merge_consecutive_turns(cleaned), dialogue.split};
    for (auto& ex : build_examples(merged)) {
      if (ex.user_text.empty() || ex.therapist_text.empty()) {
        ++dropped_examples;
        continue;
      }
      examples.push_back(std::move(ex));
    }
  }

  if (summary != nullptr) {
    ++summary->dialogues;
    summary->examples += examples.size();
    summary->dropped_empty_turns += dropped_turns;
    summary->dropped_empty_examples += dropped_examples;
  }
  return examples;
}

void write_examples_jsonl(const std::filesystem::path& path,
                          std::span<const DialogueExample> examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& ex : examples) out << json(ex).dump() << '\n';
}

std::vector<DialogueExample> read_examples_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<DialogueExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line).get<DialogueExample>());
  }
  return out;
}

}  // namespace empathrl
