#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/emotion.hpp"

namespace empathrl {

/// Lowercases, detaches every ASCII punctuation character into its own
/// token, then splits on whitespace.
std::vector<std::string> metric_tokens(std::string_view text);

enum class BleuMode : std::uint8_t { sentence_mean, corpus };

/// Smoothed sentence BLEU-4 (uniform weights, brevity penalty against the
/// single reference). Zero when no unigram matches; otherwise zero n-gram
/// counts become epsilon / denominator. Candidates shorter than 4 tokens use
/// uniform weights over the orders they have.
double sentence_bleu(std::span<const std::string> candidate, std::span<const std::string> reference,
                     double epsilon = 0.1);

/// Modified (clipped) n-gram precision as numerator / denominator.
std::pair<std::size_t, std::size_t> modified_precision(std::span<const std::string> candidate,
                                                       std::span<const std::string> reference,
                                                       std::size_t n);

/// Throws InvalidArgument on length mismatch or empty input.
double bleu(std::span<const std::string> candidates, std::span<const std::string> references,
            BleuMode mode = BleuMode::sentence_mean, double epsilon = 0.1);

enum class RougeMode : std::uint8_t { rouge1, rouge2, rougeL };

/// F1 of clipped n-gram overlap.
double rouge_n_f1(std::span<const std::string> candidate, std::span<const std::string> reference,
                  std::size_t n);
/// F1 of the longest common subsequence.
double rouge_l_f1(std::span<const std::string> candidate, std::span<const std::string> reference);

double rouge(std::span<const std::string> candidates, std::span<const std::string> references,
             RougeMode mode);

/// Porter stemmer, original published rule set. Input is expected lowercase.
std::string porter_stem(std::string_view word);

/// Symmetric synonym groups used by the METEOR synonym stage.
class SynonymTable {
 public:
  SynonymTable() = default;
  explicit SynonymTable(std::vector<std::vector<std::string>> groups);

  /// Small built-in table of everyday synonyms.
  static const SynonymTable& builtin();
  /// [["glad", "happy"], ...]
  static SynonymTable from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Words sharing a group with `word`, plus `word` itself.
  std::set<std::string, std::less<>> synonyms(std::string_view word) const;
  const std::vector<std::vector<std::string>>& groups() const noexcept { return groups_; }

 private:
  std::vector<std::vector<std::string>> groups_;
  std::map<std::string, std::vector<std::size_t>, std::less<>> index_;
};

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

/// Single-reference METEOR over token lists: exact, then stem, then synonym
/// alignment, harmonic mean weighted by alpha, fragmentation penalty
/// gamma * (chunks / matches)^beta.
double single_meteor(std::span<const std::string> candidate, std::span<const std::string> reference,
                     const SynonymTable& synonyms = SynonymTable::builtin(),
                     const MeteorParams& params = {});

double meteor(std::span<const std::string> candidates, std::span<const std::string> references,
              const SynonymTable& synonyms = SynonymTable::builtin(), const MeteorParams& params = {});

/// Fraction of positions where the prediction is present and equals the gold label.
double emotion_accuracy(std::span<const std::optional<Emotion>> predictions,
                        std::span<const Emotion> golds);

struct MetricScores {
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double meteor = 0.0;

  /// BLEU + ROUGE-1 + ROUGE-2 + ROUGE-L.
  double combined() const noexcept { return bleu + rouge1 + rouge2 + rougeL; }
};

void to_json(nlohmann::json& j, const MetricScores& m);
void from_json(const nlohmann::json& j, MetricScores& m);

struct MetricOptions {
  BleuMode bleu_mode = BleuMode::sentence_mean;
  double bleu_epsilon = 0.1;
  bool with_meteor = true;
  const SynonymTable* synonyms = nullptr;
};

MetricScores lexical_metrics(std::span<const std::string> candidates,
                             std::span<const std::string> references, const MetricOptions& options = {});

}  // namespace empathrl
