#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/checkpoint.hpp"
#include "empathrl/corpus.hpp"
#include "empathrl/encoding.hpp"
#include "empathrl/metrics.hpp"
#include "empathrl/random.hpp"
#include "empathrl/reward.hpp"

namespace empathrl {

struct GenerationConfig {
  double top_p = 1.0;
  /// 0 disables top-k filtering.
  std::size_t top_k = 0;
  double temperature = 1.0;
  std::size_t max_new_tokens = 64;
  bool greedy = false;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument on top_p outside (0, 1], non-positive
  /// temperature or zero max_new_tokens.
  void validate() const;
  bool operator==(const GenerationConfig&) const = default;
};

void to_json(nlohmann::json& j, const GenerationConfig& c);
/// Missing keys keep the values already in `c`, so partial overrides compose.
void from_json(const nlohmann::json& j, GenerationConfig& c);

/// Next-token distribution after temperature, then top-k, then top-p
/// (smallest prefix of the sorted distribution reaching top_p mass).
std::vector<double> sampling_distribution(std::span<const double> logits, const GenerationConfig& cfg);

/// Argmax (lowest id on ties) when greedy, otherwise a draw from
/// sampling_distribution.
TokenId sample_token(std::span<const double> logits, const GenerationConfig& cfg, Rng& rng);

/// Decodes from `prompt` until `stop` or the token budget. The budget is
/// max_new_tokens capped by `window - prompt.size()`.
std::vector<TokenId> generate_tokens(const GptModel& model, std::span<const TokenId> prompt,
                                     const GenerationConfig& cfg, TokenId stop, Rng& rng,
                                     std::size_t window);

struct Suggestion {
  std::string text;
  std::optional<Emotion> emotion;
  std::optional<RewardBreakdown> reward_breakdown;
  GenerationConfig gen_config_used;
  double latency_ms = 0.0;
  bool terminated_by_eos = false;
  std::vector<TokenId> raw_token_ids;
};

void to_json(nlohmann::json& j, const Suggestion& s);

/// Window used for prompts and generation: min(encoding max_len, model context).
std::size_t generation_window(const Checkpoint& ckpt);

/// Greedy, or sampled with an Rng seeded from cfg.seed. Throws
/// ContextTooLong when the prompt does not fit.
Suggestion generate(const Checkpoint& ckpt, const PromptContext& ctx, const GenerationConfig& cfg);

/// Grid winner stored in the training manifest, else (1.0, 0, 1.0).
GenerationConfig default_generation_config(const Checkpoint& ckpt);

struct GenerationGrid {
  std::vector<double> top_p;
  std::vector<std::size_t> top_k;
  std::vector<double> temperature;

  std::size_t size() const noexcept { return top_p.size() * top_k.size() * temperature.size(); }
};

void to_json(nlohmann::json& j, const GenerationGrid& g);
/// Missing axes keep the values already in `g`.
void from_json(const nlohmann::json& j, GenerationGrid& g);

struct GridCell {
  double top_p = 1.0;
  std::size_t top_k = 0;
  double temperature = 1.0;
  MetricScores scores;
  double combined = 0.0;
};

void to_json(nlohmann::json& j, const GridCell& c);

struct GridResult {
  std::vector<GridCell> table;
  std::size_t best_index = 0;
  GenerationConfig best;
};

void to_json(nlohmann::json& j, const GridResult& r);

using CellEvaluator = std::function<MetricScores(const GenerationConfig&)>;

/// Evaluates every cell (top_p outer, top_k middle, temperature inner) and
/// keeps the first cell with the strictly highest combined score.
GridResult grid_search(const GenerationGrid& grid, const GenerationConfig& base,
                       const CellEvaluator& evaluate);

/// Generates over `val` for each cell and scores BLEU + ROUGE-1/2/L against
/// the gold therapist text.
GridResult grid_search(const Checkpoint& ckpt, std::span<const DialogueExample> val,
                       const GenerationGrid& grid, const GenerationConfig& base,
                       const MetricOptions& metrics = {});

/// Writes the table as CSV: top_p,top_k,temperature,bleu,rouge1,rouge2,rougeL,combined.
std::string grid_csv(const GridResult& result);

}  // namespace empathrl
