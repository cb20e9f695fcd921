#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/checkpoint.hpp"
#include "empathrl/encoding.hpp"
#include "empathrl/reward.hpp"

namespace empathrl {

struct PpoConfig {
  double learning_rate = 1e-6;
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  bool shuffle = false;
  double top_p = 1.0;
  std::size_t top_k = 0;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
  double clip_epsilon = 0.2;
  double kl_coefficient = 0.2;
  bool adaptive_kl = false;
  double kl_target = 6.0;
  double kl_horizon = 10000.0;
  double gamma = 1.0;
  double lambda = 0.95;
  bool whiten_advantages = true;
  std::size_t ppo_epochs = 4;
  std::size_t mini_batch_size = 4;
  double vf_coef = 0.1;
  double cliprange_value = 0.2;
  double max_grad_norm = 1.0;
  /// Bound on |logprob_new - logprob_old| before exponentiation.
  double max_log_ratio = 20.0;
  /// Mean per-sequence KL above this is reported as a breach.
  double kl_ceiling = 20.0;
  double value_head_init_std = 0.01;
  std::uint64_t seed = 42;

  void validate() const;
  bool operator==(const PpoConfig&) const = default;
};

void to_json(nlohmann::json& j, const PpoConfig& c);
void from_json(const nlohmann::json& j, PpoConfig& c);

// ---------------------------------------------------------------------------
// Scalar pieces of the objective.

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A). Requires r > 0 and eps > 0.
double clipped_surrogate(double ratio, double advantage, double epsilon);

/// exp(logprob_new - logprob_old) with the exponent clamped to +-max_log_ratio.
double probability_ratio(double logprob_new, double logprob_old, double max_log_ratio = 20.0);

/// beta * (logprob_policy - logprob_ref) per token (k1 estimator).
std::vector<double> kl_penalty(std::span<const double> logprobs_policy,
                               std::span<const double> logprobs_ref, double beta);

/// GAE over one sequence; the value after the last token is 0.
std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values,
                                   double gamma, double lambda);

/// Zero mean, unit (population) variance over every element of every row.
/// Returns false, leaving the input unchanged, for fewer than 2 elements.
bool whiten(std::vector<std::vector<double>>& rows);

/// GAE per sequence, then batch whitening when requested.
std::vector<std::vector<double>> estimate_advantages(const std::vector<std::vector<double>>& rewards,
                                                     const std::vector<std::vector<double>>& values,
                                                     double gamma, double lambda, bool whiten_batch = true);

// ---------------------------------------------------------------------------

/// Linear map from the final normed hidden state to a scalar value.
struct ValueHead {
  std::vector<double> weight;
  double bias = 0.0;

  ValueHead() = default;
  ValueHead(std::size_t d_model, double init_std, std::uint64_t seed);
  double operator()(const double* hidden) const;

  nlohmann::json to_json() const;
  static ValueHead from_json(const nlohmann::json& j);
};

/// One prompt with the emotion its response is scored against.
struct RlPrompt {
  PromptContext context;
  Emotion target_emotion = Emotion::neutral;
};

RlPrompt rl_prompt_of(const DialogueExample& ex);

/// A scored batch of generated responses with per-token quantities.
struct Rollout {
  std::vector<std::vector<TokenId>> sequences;
  std::vector<std::size_t> prompt_lengths;
  std::vector<GenerationResult> responses;
  std::vector<RewardBreakdown> rewards;
  std::vector<std::vector<double>> logprobs;
  std::vector<std::vector<double>> ref_logprobs;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> token_rewards;
  std::vector<std::vector<double>> advantages;
  std::vector<std::vector<double>> returns;

  std::size_t size() const noexcept { return sequences.size(); }
  std::size_t response_length(std::size_t i) const { return sequences[i].size() - prompt_lengths[i]; }
};

struct SequenceScores {
  std::vector<std::vector<double>> logprobs;
  std::vector<std::vector<double>> values;
};

/// Log-probabilities of each response token, and values (when `head` is
/// given) at the position that predicts it.
SequenceScores score_sequences(const GptModel& model, const ValueHead* head,
                               const std::vector<std::vector<TokenId>>& sequences,
                               std::span<const std::size_t> prompt_lengths, TokenId pad);

struct LossTerms {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double total = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

/// Clipped-surrogate policy loss plus vf_coef * clipped value loss, averaged
/// over the response tokens of the selected rows. Accumulates gradients into
/// `model_grads` and `head_grads` (weight then bias) when they are nonempty.
LossTerms ppo_loss_and_grad(const GptModel& policy, const ValueHead& head, const Rollout& rollout,
                            std::span<const std::size_t> rows, const PpoConfig& config, TokenId pad,
                            std::span<double> model_grads, std::span<double> head_grads);

struct PpoBatchLog {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double mean_scaled_reward = 0.0;
  double std_scaled_reward = 0.0;
  RewardComponents mean_components;
  double mean_kl = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double beta = 0.0;
  double mean_response_tokens = 0.0;
};

nlohmann::json to_json(const PpoBatchLog& log);

struct PpoEpochLog {
  std::size_t epoch = 0;
  double mean_scaled_reward = 0.0;
  double mean_kl = 0.0;
};

struct PpoResult {
  std::vector<PpoBatchLog> batches;
  std::vector<PpoEpochLog> epochs;
  double max_batch_kl = 0.0;
  bool kl_ceiling_breached = false;
};

class PpoTrainer {
 public:
  /// The reference model is a frozen copy of `policy.model`.
  PpoTrainer(Checkpoint policy, const RewardEngine& engine, PpoConfig config);

  /// Samples one response per prompt and fills every per-token field.
  Rollout rollout(std::span<const RlPrompt> prompts, std::uint64_t seed) const;

  /// Rollout plus ppo_epochs of minibatch updates.
  PpoBatchLog step(std::span<const RlPrompt> batch, std::size_t epoch, std::size_t batch_index);

  /// Full run in dataset order. With `out_dir`, metrics.jsonl gets one row
  /// per batch and a checkpoint is written after every epoch.
  PpoResult train(std::span<const RlPrompt> dataset,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

  const Checkpoint& policy() const noexcept { return policy_; }
  Checkpoint& policy() noexcept { return policy_; }
  const GptModel& reference() const noexcept { return reference_; }
  const ValueHead& value_head() const noexcept { return head_; }
  double beta() const noexcept { return beta_; }
  const PpoConfig& config() const noexcept { return config_; }

  /// Writes the policy checkpoint plus value_head.json.
  void save(const std::filesystem::path& dir) const;

 private:
  Checkpoint policy_;
  GptModel reference_;
  ValueHead head_;
  const RewardEngine& engine_;
  PpoConfig config_;
  double beta_;
  std::vector<double> model_m_, model_v_, head_m_, head_v_;
  std::size_t adam_t_ = 0;

  void adam_update(std::span<double> params, std::span<const double> grads, std::vector<double>& m,
                   std::vector<double>& v, double c1, double c2) const;
};

}  // namespace empathrl
