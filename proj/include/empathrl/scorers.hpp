#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/corpus.hpp"
#include "empathrl/reward.hpp"

namespace empathrl {

// ---------------------------------------------------------------------------
// Deterministic stubs for tests.

class FunctionEmbedding final : public EmbeddingProvider {
 public:
  using Fn = std::function<std::vector<double>(std::string_view)>;
  FunctionEmbedding(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::vector<double> embed(std::string_view text) const override { return fn_(text); }
  std::string model_id() const override { return id_; }

 private:
  std::string id_;
  Fn fn_;
};

class FunctionEmpathy final : public EmpathyScorer {
 public:
  using Fn = std::function<double(std::string_view)>;
  FunctionEmpathy(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  double positive_probability(std::string_view text) const override { return fn_(text); }
  std::string model_id() const override { return id_; }

 private:
  std::string id_;
  Fn fn_;
};

class FunctionSentiment final : public SentimentScorer {
 public:
  using Fn = std::function<SentimentProbabilities(std::string_view)>;
  FunctionSentiment(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  SentimentProbabilities probabilities(std::string_view text) const override { return fn_(text); }
  std::string model_id() const override { return id_; }

 private:
  std::string id_;
  Fn fn_;
};

/// Every text embeds to the same unit vector; empathy p = 0.5; sentiment (0.5, 0.5).
ScorerRegistry stub_registry();

// ---------------------------------------------------------------------------
// Built-in lexical scorers: no model files, fully deterministic.

/// Signed feature hashing of content words and character trigrams, L2-normalized.
class HashedNgramEmbedding final : public EmbeddingProvider {
 public:
  explicit HashedNgramEmbedding(std::size_t dim = 512) : dim_(dim) {}
  std::vector<double> embed(std::string_view text) const override;
  std::string model_id() const override { return "lexical/hashed-ngram-" + std::to_string(dim_); }

 private:
  std::size_t dim_;
};

/// Logistic score over supportive versus dismissive cue phrases.
class LexiconEmpathy final : public EmpathyScorer {
 public:
  double positive_probability(std::string_view text) const override;
  std::string model_id() const override { return "lexical/empathy-cues"; }
};

/// Logistic score over a polarity lexicon with single-word negation.
class LexiconSentiment final : public SentimentScorer {
 public:
  SentimentProbabilities probabilities(std::string_view text) const override;
  std::string model_id() const override { return "lexical/sentiment-lexicon"; }
};

ScorerRegistry lexical_registry();

// ---------------------------------------------------------------------------
// Emotion classification for corpora without utterance labels.

class EmotionClassifier {
 public:
  virtual ~EmotionClassifier() = default;
  /// Top label in the classifier's own taxonomy.
  virtual std::string top_label(std::string_view text) const = 0;
  virtual std::string model_id() const = 0;
};

class FunctionEmotionClassifier final : public EmotionClassifier {
 public:
  using Fn = std::function<std::string(std::string_view)>;
  FunctionEmotionClassifier(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string top_label(std::string_view text) const override { return fn_(text); }
  std::string model_id() const override { return id_; }

 private:
  std::string id_;
  Fn fn_;
};

/// Keyword classifier emitting go_emotions labels; "neutral" when nothing fires.
class LexicalEmotionClassifier final : public EmotionClassifier {
 public:
  std::string top_label(std::string_view text) const override;
  std::string model_id() const override { return "lexical/go-emotions-keywords"; }
};

/// Top label of each utterance mapped onto the seven categories.
std::vector<Emotion> annotate_esconv_emotions(std::span<const std::string> utterances,
                                              const EmotionClassifier& classifier,
                                              const EmotionMapper& mapper);

// ---------------------------------------------------------------------------
// HTTP sidecar hosting the pretrained classifiers (tools/scorer_sidecar.py).

class SidecarClient {
 public:
  /// `base_url` like "http://127.0.0.1:8765".
  SidecarClient(std::string base_url, double timeout_s);
  /// POSTs JSON and returns the parsed reply. Throws ScorerError on any failure.
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;
  const std::string& base_url() const noexcept { return base_url_; }

 private:
  std::string base_url_;
  double timeout_s_;
  mutable std::mutex mutex_;
};

class RemoteEmbedding final : public EmbeddingProvider {
 public:
  RemoteEmbedding(std::shared_ptr<SidecarClient> client, std::string model)
      : client_(std::move(client)), model_(std::move(model)) {}
  std::vector<double> embed(std::string_view text) const override;
  std::string model_id() const override { return model_; }

 private:
  std::shared_ptr<SidecarClient> client_;
  std::string model_;
};

class RemoteEmpathy final : public EmpathyScorer {
 public:
  RemoteEmpathy(std::shared_ptr<SidecarClient> client, std::string model)
      : client_(std::move(client)), model_(std::move(model)) {}
  double positive_probability(std::string_view text) const override;
  std::string model_id() const override { return model_; }

 private:
  std::shared_ptr<SidecarClient> client_;
  std::string model_;
};

class RemoteSentiment final : public SentimentScorer {
 public:
  RemoteSentiment(std::shared_ptr<SidecarClient> client, std::string model)
      : client_(std::move(client)), model_(std::move(model)) {}
  SentimentProbabilities probabilities(std::string_view text) const override;
  std::string model_id() const override { return model_; }

 private:
  std::shared_ptr<SidecarClient> client_;
  std::string model_;
};

class RemoteEmotionClassifier final : public EmotionClassifier {
 public:
  RemoteEmotionClassifier(std::shared_ptr<SidecarClient> client, std::string model)
      : client_(std::move(client)), model_(std::move(model)) {}
  std::string top_label(std::string_view text) const override;
  std::string model_id() const override { return model_; }

 private:
  std::shared_ptr<SidecarClient> client_;
  std::string model_;
};

/// Registry for config.scorer_backend ("stub", "lexical" or "remote").
ScorerRegistry make_scorer_registry(const RewardConfig& config);
std::shared_ptr<const EmotionClassifier> make_emotion_classifier(const RewardConfig& config);

}  // namespace empathrl
