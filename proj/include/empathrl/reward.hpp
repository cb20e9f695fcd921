#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/emotion.hpp"

namespace empathrl {

struct RewardWeights {
  double quality = 1.1;
  double emotion = 1.2;
  double relevance = 1.1;
  double empathy = 0.7;
  double sentiment = 0.7;

  double sum() const noexcept { return quality + emotion + relevance + empathy + sentiment; }
  /// Throws unless every weight is strictly positive.
  void validate() const;
  bool operator==(const RewardWeights&) const = default;
};

void to_json(nlohmann::json& j, const RewardWeights& w);
void from_json(const nlohmann::json& j, RewardWeights& w);

/// The five component scores, each in [-1, 1].
struct RewardComponents {
  double quality = 0.0;
  double emotion = 0.0;
  double relevance = 0.0;
  double empathy = 0.0;
  double sentiment = 0.0;
};

struct RewardBreakdown {
  double r_q = 0.0;
  double r_e = 0.0;
  double r_r = 0.0;
  double r_emp = 0.0;
  double r_s = 0.0;
  RewardWeights weights;
  double raw_total = 0.0;
  /// clamp(raw_total * scale_max / sum(weights), -scale_max, scale_max)
  double scaled_total = 0.0;
};

void to_json(nlohmann::json& j, const RewardBreakdown& b);
void from_json(const nlohmann::json& j, RewardBreakdown& b);

/// Throws InvalidArgument when a component lies outside [-1, 1] or is not finite.
RewardBreakdown composite_reward(const RewardComponents& c, const RewardWeights& w,
                                 double scale_max = 10.0);

struct FluencyConfig {
  double base = 1.0;
  /// Repetition penalty applies when the distinct-trigram ratio is below this.
  double distinct_trigram_threshold = 0.6;
  /// Penalty = repetition_scale * (1 - distinct-trigram ratio).
  double repetition_scale = 2.0;
  /// Below this fraction of alphabetic characters the score is floored at -1.
  double min_alpha_fraction = 0.5;
  std::size_t min_tokens = 3;
  std::size_t repeated_ngram_n = 4;
  std::size_t repeated_ngram_count = 3;
  double repeated_ngram_penalty = 1.0;

  bool operator==(const FluencyConfig&) const = default;
};

void to_json(nlohmann::json& j, const FluencyConfig& c);
void from_json(const nlohmann::json& j, FluencyConfig& c);

double fluency_reward(std::string_view text, const FluencyConfig& config = {});

struct EmotionRewardConfig {
  double exact = 1.0;
  double same_polarity = 0.4;
  double neutral_mismatch = -0.2;
  double opposite_polarity = -1.0;
  double missing = -0.5;

  bool operator==(const EmotionRewardConfig&) const = default;
};

void to_json(nlohmann::json& j, const EmotionRewardConfig& c);
void from_json(const nlohmann::json& j, EmotionRewardConfig& c);

double emotion_reward(std::optional<Emotion> predicted, Emotion target, bool has_emotion_token,
                      const EmotionRewardConfig& config = {});

// ---------------------------------------------------------------------------
// Scorer interfaces. Implementations must be safe for concurrent calls.

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  /// Unit-norm vector (a zero vector only for text with no features).
  virtual std::vector<double> embed(std::string_view text) const = 0;
  virtual std::string model_id() const = 0;
};

class EmpathyScorer {
 public:
  virtual ~EmpathyScorer() = default;
  /// Probability of the empathic class, in [0, 1].
  virtual double positive_probability(std::string_view text) const = 0;
  virtual std::string model_id() const = 0;
};

struct SentimentProbabilities {
  double positive = 0.5;
  double negative = 0.5;
};

class SentimentScorer {
 public:
  virtual ~SentimentScorer() = default;
  virtual SentimentProbabilities probabilities(std::string_view text) const = 0;
  virtual std::string model_id() const = 0;
};

struct ScorerRegistry {
  std::shared_ptr<const EmbeddingProvider> embedding;
  std::shared_ptr<const EmpathyScorer> empathy;
  std::shared_ptr<const SentimentScorer> sentiment;

  nlohmann::json describe() const;
};

/// Cosine of the two embeddings; 0 with a warning when either text is empty.
double relevance_reward(std::string_view response, std::string_view user_input,
                        const ScorerRegistry& registry);
/// 2p - 1. An empty response scores -1.
double empathy_reward(std::string_view response, const ScorerRegistry& registry);
/// p_positive - p_negative. An empty response scores -1.
double sentiment_reward(std::string_view response, const ScorerRegistry& registry);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

struct RewardConfig {
  RewardWeights weights;
  FluencyConfig fluency;
  EmotionRewardConfig emotion;
  double scale_max = 10.0;
  /// "lexical" (built in), "remote" (HTTP sidecar) or "stub" (constant midpoints).
  std::string scorer_backend = "lexical";
  std::string sidecar_url = "http://127.0.0.1:8765";
  double sidecar_timeout_s = 30.0;
  std::string embedding_model = "sentence-transformers/all-MiniLM-L6-v2";
  std::string empathy_model = "paragon-analytics/bert_empathy";
  std::string sentiment_model = "distilbert-base-uncased-finetuned-sst-2-english";
  std::string emotion_model = "SamLowe/roberta-base-go_emotions";

  bool operator==(const RewardConfig&) const = default;
};

void to_json(nlohmann::json& j, const RewardConfig& c);
void from_json(const nlohmann::json& j, RewardConfig& c);

/// What one generated response is scored against.
struct RewardInput {
  std::string response_text;
  std::optional<Emotion> predicted_emotion;
  bool has_emotion_token = false;
  Emotion target_emotion = Emotion::neutral;
  std::string user_text;
};

/// Scores responses with the five components and the weighted composite.
class RewardEngine {
 public:
  RewardEngine(RewardConfig config, ScorerRegistry registry);
  virtual ~RewardEngine() = default;

  /// Component scores before weighting.
  virtual RewardComponents components(const RewardInput& input) const;

  RewardBreakdown score(const RewardInput& input) const;
  std::vector<RewardBreakdown> score_batch(const std::vector<RewardInput>& inputs) const;

  /// Every later score() appends its breakdown as one JSON line.
  void set_audit_log(const std::filesystem::path& path);

  const RewardConfig& config() const noexcept { return config_; }
  const ScorerRegistry& registry() const noexcept { return registry_; }

 private:
  RewardConfig config_;
  ScorerRegistry registry_;
  std::optional<std::filesystem::path> audit_path_;
  mutable std::mutex audit_mutex_;
};

}  // namespace empathrl
