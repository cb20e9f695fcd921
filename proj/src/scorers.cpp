#include "empathrl/scorers.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <set>

#include <httplib.h>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

namespace {

class ConstantEmbedding final : public EmbeddingProvider {
 public:
  std::vector<double> embed(std::string_view text) const override {
    if (text.empty()) return {0.0, 0.0};
    return {1.0, 0.0};
  }
  std::string model_id() const override { return "stub/constant-embedding"; }
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t fnv1a(std::string_view s, std::uint64_t salt) {
  std::uint64_t h = 1469598103934665603ull ^ salt;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

/// Lowercased runs of letters and apostrophes.
std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalpha(u) || ch == '\'' || u >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

const std::set<std::string, std::less<>>& stop_words() {
  static const std::set<std::string, std::less<>> words = {
      "a",    "an",   "the",  "and",  "or",   "but", "if",   "of",   "to",    "in",   "on",
      "at",   "for",  "from", "with", "by",   "as",  "is",   "am",   "are",   "was",  "were",
      "be",   "been", "do",   "did",  "does", "i",   "you",  "he",   "she",   "it",   "we",
      "they", "me",   "my",   "your", "our",  "its", "this", "that", "these", "those", "so",
      "how",  "what", "have", "has",  "had",  "can", "will", "would", "i'm",  "it's", "make",
      "keep", "having"};
  return words;
}

std::string crude_stem(std::string w) {
  for (std::string_view suffix : {"ing", "ed", "es", "s"}) {
    if (w.size() > suffix.size() + 3 && w.ends_with(suffix)) {
      w.resize(w.size() - suffix.size());
      break;
    }
  }
  return w;
}

std::string lower_copy(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::size_t count_phrase(const std::string& haystack, std::string_view phrase) {
  std::size_t n = 0;
  for (auto pos = haystack.find(phrase); pos != std::string::npos; pos = haystack.find(phrase, pos + 1)) {
    const bool left_ok = pos == 0 || !std::isalpha(static_cast<unsigned char>(haystack[pos - 1]));
    const auto end = pos + phrase.size();
    const bool right_ok = end >= haystack.size() || !std::isalpha(static_cast<unsigned char>(haystack[end]));
    if (left_ok && right_ok) ++n;
  }
  return n;
}

}  // namespace

ScorerRegistry stub_registry() {
  ScorerRegistry r;
  r.embedding = std::make_shared<ConstantEmbedding>();
  r.empathy = std::make_shared<FunctionEmpathy>("stub/empathy-0.5", [](std::string_view) { return 0.5; });
  r.sentiment = std::make_shared<FunctionSentiment>(
      "stub/sentiment-0.5", [](std::string_view) { return SentimentProbabilities{0.5, 0.5}; });
  return r;
}

std::vector<double> HashedNgramEmbedding::embed(std::string_view text) const {
  std::vector<double> v(dim_, 0.0);
  auto add = [&](std::string_view feature, double weight, std::uint64_t salt) {
    const auto h = fnv1a(feature, salt);
    const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
    v[h % dim_] += sign * weight;
  };
  for (const auto& w : words_of(text)) {
    if (stop_words().contains(w)) continue;
    const auto stem = crude_stem(w);
    add(stem, 1.0, 0x11);
    const std::string padded = "#" + stem + "#";
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) add(padded.substr(i, 3), 0.25, 0x22);
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
  return v;
}

double LexiconEmpathy::positive_probability(std::string_view text) const {
  static constexpr std::array<std::string_view, 24> kSupportive = {
      "i hear",        "that sounds",  "sounds like",  "understand",   "it makes sense",
      "must be",       "must have",    "i'm sorry",    "sorry to hear", "how do you feel",
      "how did",       "tell me more", "want to talk", "you feel",     "you're feeling",
      "it's okay",     "that's okay",  "here for you", "with you",     "difficult",
      "hard for you",  "thank you for", "glad you",    "what happened"};
  static constexpr std::array<std::string_view, 14> kDismissive = {
      "get over",  "whatever",       "calm down",   "not a big deal", "stop",
      "your fault", "don't care",    "who cares",   "just deal",      "overreacting",
      "so what",   "not my problem", "ridiculous",  "shut up"};
  const auto lower = lower_copy(text);
  double hits = 0.0;
  for (auto p : kSupportive) hits += static_cast<double>(count_phrase(lower, p));
  for (auto p : kDismissive) hits -= 1.5 * static_cast<double>(count_phrase(lower, p));
  if (lower.find('?') != std::string::npos) hits += 0.5;
  return sigmoid(1.2 * hits - 0.4);
}

SentimentProbabilities LexiconSentiment::probabilities(std::string_view text) const {
  static const std::set<std::string, std::less<>> kPositive = {
      "glad",      "good",     "great",    "happy",   "hope",     "hopeful", "better",   "love",
      "thank",     "thanks",   "proud",    "safe",    "calm",     "support", "supported", "welcome",
      "brave",     "strong",   "strength", "nice",    "wonderful", "helpful", "progress", "relief",
      "relieved",  "okay",     "comfort",  "care",    "kind",     "enjoy",   "joy",      "positive",
      "appreciate", "courage", "healing",  "well",    "fine",     "grateful", "pleased",  "excited"};
  static const std::set<std::string, std::less<>> kNegative = {
      "hopeless", "bad",      "terrible", "awful",   "sad",      "hate",     "angry",    "worse",
      "worst",    "pain",     "hurt",     "afraid",  "scared",   "alone",    "lonely",   "fail",
      "failure",  "useless",  "worthless", "never",  "horrible", "miserable", "anxious", "upset",
      "depressed", "cry",     "crying",   "guilty",  "ashamed",  "disgusting", "fear",   "stupid",
      "problem",  "wrong",    "lost",     "tired",   "broken",   "stress",   "stressed", "nothing"};
  static const std::set<std::string, std::less<>> kNegators = {"not", "no", "never", "don't", "can't",
                                                               "isn't", "wasn't", "won't", "didn't"};
  double score = 0.0;
  bool negate = false;
  for (const auto& w : words_of(text)) {
    if (kNegators.contains(w)) {
      negate = true;
      continue;
    }
    double s = 0.0;
    if (kPositive.contains(w)) s = 1.0;
    if (kNegative.contains(w)) s = -1.0;
    if (s != 0.0) {
      score += negate ? -s : s;
      negate = false;
    }
  }
  const double pos = sigmoid(1.5 * score);
  return SentimentProbabilities{pos, 1.0 - pos};
}

ScorerRegistry lexical_registry() {
  ScorerRegistry r;
  r.embedding = std::make_shared<HashedNgramEmbedding>();
  r.empathy = std::make_shared<LexiconEmpathy>();
  r.sentiment = std::make_shared<LexiconSentiment>();
  return r;
}

std::string LexicalEmotionClassifier::top_label(std::string_view text) const {
  struct Cue {
    std::string_view word;
    std::string_view label;
  };
  static constexpr std::array<Cue, 38> kCues = {{
      {"angry", "anger"},          {"furious", "anger"},        {"mad", "anger"},
      {"annoyed", "annoyance"},    {"annoying", "annoyance"},   {"irritated", "annoyance"},
      {"sad", "sadness"},          {"cry", "sadness"},          {"crying", "sadness"},
      {"miss", "sadness"},         {"lost", "sadness"},         {"grief", "grief"},
      {"died", "grief"},           {"passed", "grief"},         {"disappointed", "disappointment"},
      {"sorry", "remorse"},        {"regret", "remorse"},       {"afraid", "fear"},
      {"scared", "fear"},          {"terrified", "fear"},       {"anxious", "nervousness"},
      {"nervous", "nervousness"},  {"worried", "nervousness"},  {"disgusting", "disgust"},
      {"gross", "disgust"},        {"happy", "joy"},            {"glad", "joy"},
      {"great", "admiration"},     {"thank", "gratitude"},      {"thanks", "gratitude"},
      {"love", "love"},            {"hope", "optimism"},        {"excited", "excitement"},
      {"proud", "pride"},          {"relieved", "relief"},      {"confused", "confusion"},
      {"curious", "curiosity"},    {"embarrassed", "embarrassment"},
  }};
  for (const auto& w : words_of(text)) {
    for (const auto& cue : kCues) {
      if (w == cue.word) return std::string(cue.label);
    }
  }
  return "neutral";
}

std::vector<Emotion> annotate_esconv_emotions(std::span<const std::string> utterances,
                                              const EmotionClassifier& classifier,
                                              const EmotionMapper& mapper) {
  std::vector<Emotion> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back(mapper.map(classifier.top_label(u)));
  return out;
}

SidecarClient::SidecarClient(std::string base_url, double timeout_s)
    : base_url_(std::move(base_url)), timeout_s_(timeout_s) {
  if (base_url_.empty()) throw InvalidArgument("sidecar URL is empty");
}

json SidecarClient::post(const std::string& path, const json& body) const {
  std::lock_guard lock(mutex_);
  httplib::Client client(base_url_);
  const auto secs = static_cast<time_t>(timeout_s_);
  const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  auto res = client.Post(path, body.dump(), "application/json");
  if (!res) {
    throw ScorerError("scorer sidecar " + base_url_ + path + " unreachable: " +
                      httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw ScorerError("scorer sidecar " + path + " returned HTTP " + std::to_string(res->status));
  }
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ScorerError("scorer sidecar " + path + " returned invalid JSON: " + e.what());
  }
}

std::vector<double> RemoteEmbedding::embed(std::string_view text) const {
  const auto reply = client_->post("/embed", json{{"model", model_}, {"text", text}});
  if (!reply.contains("embedding") || !reply["embedding"].is_array()) {
    throw ScorerError("sidecar /embed reply lacks an embedding array");
  }
  return reply["embedding"].get<std::vector<double>>();
}

double RemoteEmpathy::positive_probability(std::string_view text) const {
  const auto reply = client_->post("/empathy", json{{"model", model_}, {"text", text}});
  if (!reply.contains("positive") || !reply["positive"].is_number()) {
    throw ScorerError("sidecar /empathy reply lacks 'positive'");
  }
  return reply["positive"].get<double>();
}

SentimentProbabilities RemoteSentiment::probabilities(std::string_view text) const {
  const auto reply = client_->post("/sentiment", json{{"model", model_}, {"text", text}});
  if (!reply.contains("positive") || !reply.contains("negative")) {
    throw ScorerError("sidecar /sentiment reply lacks 'positive'/'negative'");
  }
  return SentimentProbabilities{reply["positive"].get<double>(), reply["negative"].get<double>()};
}

std::string RemoteEmotionClassifier::top_label(std::string_view text) const {
  const auto reply = client_->post("/emotion", json{{"model", model_}, {"text", text}});
  if (!reply.contains("label") || !reply["label"].is_string()) {
    throw ScorerError("sidecar /emotion reply lacks 'label'");
  }
  return reply["label"].get<std::string>();
}

ScorerRegistry make_scorer_registry(const RewardConfig& config) {
  if (config.scorer_backend == "stub") return stub_registry();
  if (config.scorer_backend == "lexical") return lexical_registry();
  if (config.scorer_backend == "remote") {
    auto client = std::make_shared<SidecarClient>(config.sidecar_url, config.sidecar_timeout_s);
    ScorerRegistry r;
    r.embedding = std::make_shared<RemoteEmbedding>(client, config.embedding_model);
    r.empathy = std::make_shared<RemoteEmpathy>(client, config.empathy_model);
    r.sentiment = std::make_shared<RemoteSentiment>(client, config.sentiment_model);
    return r;
  }
  throw InvalidArgument("unknown reward.scorer_backend '" + config.scorer_backend +
                        "' (expected stub, lexical or remote)");
}

std::shared_ptr<const EmotionClassifier> make_emotion_classifier(const RewardConfig& config) {
  if (config.scorer_backend == "remote") {
    auto client = std::make_shared<SidecarClient>(config.sidecar_url, config.sidecar_timeout_s);
    return std::make_shared<RemoteEmotionClassifier>(client, config.emotion_model);
  }
  if (config.scorer_backend == "stub") {
    return std::make_shared<FunctionEmotionClassifier>("stub/neutral",
                                                       [](std::string_view) { return std::string("neutral"); });
  }
  return std::make_shared<LexicalEmotionClassifier>();
}

}  // namespace empathrl
