#include "empathrl/reward.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

void RewardWeights::validate() const {
  for (double w : {quality, emotion, relevance, empathy, sentiment}) {
    if (!(w > 0.0) || !std::isfinite(w)) throw InvalidArgument("reward weights must be strictly positive");
  }
}

void to_json(json& j, const RewardWeights& w) {
  j = json{{"quality", w.quality},
           {"emotion", w.emotion},
           {"relevance", w.relevance},
           {"empathy", w.empathy},
           {"sentiment", w.sentiment}};
}

void from_json(const json& j, RewardWeights& w) {
  RewardWeights d;
  w.quality = j.value("quality", d.quality);
  w.emotion = j.value("emotion", d.emotion);
  w.relevance = j.value("relevance", d.relevance);
  w.empathy = j.value("empathy", d.empathy);
  w.sentiment = j.value("sentiment", d.sentiment);
}

void to_json(json& j, const RewardBreakdown& b) {
  j = json{{"r_q", b.r_q},         {"r_e", b.r_e},     {"r_r", b.r_r},
           {"r_emp", b.r_emp},     {"r_s", b.r_s},     {"weights", b.weights},
           {"raw_total", b.raw_total}, {"scaled_total", b.scaled_total}};
}

void from_json(const json& j, RewardBreakdown& b) {
  b.r_q = j.at("r_q").get<double>();
  b.r_e = j.at("r_e").get<double>();
  b.r_r = j.at("r_r").get<double>();
  b.r_emp = j.at("r_emp").get<double>();
  b.r_s = j.at("r_s").get<double>();
  b.weights = j.at("weights").get<RewardWeights>();
  b.raw_total = j.at("raw_total").get<double>();
  b.scaled_total = j.at("scaled_total").get<double>();
}

RewardBreakdown composite_reward(const RewardComponents& c, const RewardWeights& w, double scale_max) {
  w.validate();
  if (!(scale_max > 0.0)) throw InvalidArgument("scale_max must be positive");
  for (double x : {c.quality, c.emotion, c.relevance, c.empathy, c.sentiment}) {
    if (!std::isfinite(x) || x < -1.0 || x > 1.0) {
      throw InvalidArgument("reward component " + std::to_string(x) + " is outside [-1, 1]");
    }
  }
  RewardBreakdown b;
  b.r_q = c.quality;
  b.r_e = c.emotion;
  b.r_r = c.relevance;
  b.r_emp = c.empathy;
  b.r_s = c.sentiment;
  b.weights = w;
  b.raw_total = w.quality * c.quality + w.emotion * c.emotion + w.relevance * c.relevance +
                w.empathy * c.empathy + w.sentiment * c.sentiment;
  b.scaled_total = std::clamp(b.raw_total * scale_max / w.sum(), -scale_max, scale_max);
  return b;
}

void to_json(json& j, const FluencyConfig& c) {
  j = json{{"base", c.base},
           {"distinct_trigram_threshold", c.distinct_trigram_threshold},
           {"repetition_scale", c.repetition_scale},
           {"min_alpha_fraction", c.min_alpha_fraction},
           {"min_tokens", c.min_tokens},
           {"repeated_ngram_n", c.repeated_ngram_n},
           {"repeated_ngram_count", c.repeated_ngram_count},
           {"repeated_ngram_penalty", c.repeated_ngram_penalty}};
}

void from_json(const json& j, FluencyConfig& c) {
  FluencyConfig d;
  c.base = j.value("base", d.base);
  c.distinct_trigram_threshold = j.value("distinct_trigram_threshold", d.distinct_trigram_threshold);
  c.repetition_scale = j.value("repetition_scale", d.repetition_scale);
  c.min_alpha_fraction = j.value("min_alpha_fraction", d.min_alpha_fraction);
  c.min_tokens = j.value("min_tokens", d.min_tokens);
  c.repeated_ngram_n = j.value("repeated_ngram_n", d.repeated_ngram_n);
  c.repeated_ngram_count = j.value("repeated_ngram_count", d.repeated_ngram_count);
  c.repeated_ngram_penalty = j.value("repeated_ngram_penalty", d.repeated_ngram_penalty);
}

namespace {

std::vector<std::string> lower_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join_ngram(const std::vector<std::string>& words, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) key.push_back(' ');
    key += words[start + i];
  }
  return key;
}

}  // namespace

double fluency_reward(std::string_view text, const FluencyConfig& config) {
  std::size_t visible = 0;
  std::size_t alpha = 0;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) continue;
    ++visible;
    // UTF-8 continuation and lead bytes count as letters.
    if (std::isalpha(u) || u >= 0x80) ++alpha;
  }
  const auto words = lower_words(text);
  if (words.size() < config.min_tokens || visible == 0 ||
      static_cast<double>(alpha) / static_cast<double>(visible) < config.min_alpha_fraction) {
    return -1.0;
  }

  double score = config.base;
  if (words.size() >= 3) {
    std::map<std::string, std::size_t> trigrams;
    for (std::size_t i = 0; i + 3 <= words.size(); ++i) ++trigrams[join_ngram(words, i, 3)];
    const double ratio = static_cast<double>(trigrams.size()) / static_cast<double>(words.size() - 2);
    if (ratio < config.distinct_trigram_threshold) score -= config.repetition_scale * (1.0 - ratio);
  }
  const std::size_t n = config.repeated_ngram_n;
  if (n > 0 && words.size() >= n) {
    std::map<std::string, std::size_t> grams;
    for (std::size_t i = 0; i + n <= words.size(); ++i) ++grams[join_ngram(words, i, n)];
    for (const auto& [gram, count] : grams) {
      if (count >= config.repeated_ngram_count) {
        score -= config.repeated_ngram_penalty;
        break;
      }
    }
  }
  return std::clamp(score, -1.0, 1.0);
}

void to_json(json& j, const EmotionRewardConfig& c) {
  j = json{{"exact", c.exact},
           {"same_polarity", c.same_polarity},
           {"neutral_mismatch", c.neutral_mismatch},
           {"opposite_polarity", c.opposite_polarity},
           {"missing", c.missing}};
}

void from_json(const json& j, EmotionRewardConfig& c) {
  EmotionRewardConfig d;
  c.exact = j.value("exact", d.exact);
  c.same_polarity = j.value("same_polarity", d.same_polarity);
  c.neutral_mismatch = j.value("neutral_mismatch", d.neutral_mismatch);
  c.opposite_polarity = j.value("opposite_polarity", d.opposite_polarity);
  c.missing = j.value("missing", d.missing);
}

double emotion_reward(std::optional<Emotion> predicted, Emotion target, bool has_emotion_token,
                      const EmotionRewardConfig& config) {
  if (!has_emotion_token || !predicted) return config.missing;
  if (*predicted == target) return config.exact;
  const auto a = polarity(*predicted);
  const auto b = polarity(target);
  if (a == b) return config.same_polarity;
  if (a == Polarity::neutral || b == Polarity::neutral) return config.neutral_mismatch;
  return config.opposite_polarity;
}

json ScorerRegistry::describe() const {
  return json{{"embedding", embedding ? embedding->model_id() : "none"},
              {"empathy", empathy ? empathy->model_id() : "none"},
              {"sentiment", sentiment ? sentiment->model_id() : "none"}};
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ScorerError("embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double relevance_reward(std::string_view response, std::string_view user_input,
                        const ScorerRegistry& registry) {
  if (!registry.embedding) throw ScorerError("no embedding provider configured");
  if (response.empty() || user_input.empty()) {
    spdlog::warn("relevance_reward: empty text scores 0");
    return 0.0;
  }
  return cosine_similarity(registry.embedding->embed(response), registry.embedding->embed(user_input));
}

namespace {

double checked_probability(double p, const char* what) {
  if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
    throw ScorerError(std::string(what) + " scorer returned probability outside [0, 1]");
  }
  return p;
}

}  // namespace

double empathy_reward(std::string_view response, const ScorerRegistry& registry) {
  if (!registry.empathy) throw ScorerError("no empathy scorer configured");
  if (response.empty()) return -1.0;
  const double p = checked_probability(registry.empathy->positive_probability(response), "empathy");
  return std::clamp(2.0 * p - 1.0, -1.0, 1.0);
}

double sentiment_reward(std::string_view response, const ScorerRegistry& registry) {
  if (!registry.sentiment) throw ScorerError("no sentiment scorer configured");
  if (response.empty()) return -1.0;
  const auto probs = registry.sentiment->probabilities(response);
  const double pos = checked_probability(probs.positive, "sentiment");
  const double neg = checked_probability(probs.negative, "sentiment");
  return std::clamp(pos - neg, -1.0, 1.0);
}

void to_json(json& j, const RewardConfig& c) {
  j = json{{"weights", c.weights},
           {"fluency", c.fluency},
           {"emotion", c.emotion},
           {"scale_max", c.scale_max},
           {"scorer_backend", c.scorer_backend},
           {"sidecar_url", c.sidecar_url},
           {"sidecar_timeout_s", c.sidecar_timeout_s},
           {"embedding_model", c.embedding_model},
           {"empathy_model", c.empathy_model},
           {"sentiment_model", c.sentiment_model},
           {"emotion_model", c.emotion_model}};
}

void from_json(const json& j, RewardConfig& c) {
  RewardConfig d;
  c.weights = j.value("weights", d.weights);
  c.fluency = j.value("fluency", d.fluency);
  c.emotion = j.value("emotion", d.emotion);
  c.scale_max = j.value("scale_max", d.scale_max);
  c.scorer_backend = j.value("scorer_backend", d.scorer_backend);
  c.sidecar_url = j.value("sidecar_url", d.sidecar_url);
  c.sidecar_timeout_s = j.value("sidecar_timeout_s", d.sidecar_timeout_s);
  c.embedding_model = j.value("embedding_model", d.embedding_model);
  c.empathy_model = j.value("empathy_model", d.empathy_model);
  c.sentiment_model = j.value("sentiment_model", d.sentiment_model);
  c.emotion_model = j.value("emotion_model", d.emotion_model);
}

RewardEngine::RewardEngine(RewardConfig config, ScorerRegistry registry)
    : config_(std::move(config)), registry_(std::move(registry)) {
  config_.weights.validate();
}

RewardComponents RewardEngine::components(const RewardInput& in) const {
  RewardComponents c;
  c.quality = fluency_reward(in.response_text, config_.fluency);
  c.emotion = emotion_reward(in.predicted_emotion, in.target_emotion, in.has_emotion_token, config_.emotion);
  c.relevance = relevance_reward(in.response_text, in.user_text, registry_);
  c.empathy = empathy_reward(in.response_text, registry_);
  c.sentiment = sentiment_reward(in.response_text, registry_);
  return c;
}

RewardBreakdown RewardEngine::score(const RewardInput& input) const {
  const auto b = composite_reward(components(input), config_.weights, config_.scale_max);
  std::lock_guard lock(audit_mutex_);
  if (audit_path_) {
    std::ofstream out(*audit_path_, std::ios::app);
    if (!out) throw IoError("cannot append to reward audit log " + audit_path_->string());
    json row = b;
    row["response"] = input.response_text;
    row["target_emotion"] = to_string(input.target_emotion);
    row["predicted_emotion"] = input.predicted_emotion ? json(to_string(*input.predicted_emotion)) : json();
    out << row.dump() << '\n';
  }
  return b;
}

std::vector<RewardBreakdown> RewardEngine::score_batch(const std::vector<RewardInput>& inputs) const {
  std::vector<RewardBreakdown> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(score(in));
  return out;
}

void RewardEngine::set_audit_log(const std::filesystem::path& path) {
  std::lock_guard lock(audit_mutex_);
  audit_path_ = path;
}

}  // namespace empathrl
