#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/checkpoint.hpp"
#include "empathrl/encoding.hpp"
#include "empathrl/gpt_model.hpp"

namespace empathrl {

enum class SftVariant : std::uint8_t { with_emotion, no_emotion };

std::string_view to_string(SftVariant v) noexcept;
/// Accepts "with_emotion"/"with-emotion" and "no_emotion"/"no-emotion".
SftVariant parse_sft_variant(std::string_view s);

struct SftConfig {
  std::string optimizer = "adamw";
  double learning_rate = 2e-5;
  std::size_t batch_size = 32;
  double warmup_ratio = 0.1;
  std::size_t max_epochs = 20;
  std::string loss = "cross_entropy";
  /// Patience cannot stop training before this epoch.
  std::size_t early_stop_epoch = 10;
  std::size_t validate_every_epochs = 1;
  std::size_t patience = 3;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  bool shuffle = true;
  std::size_t max_len = kDefaultMaxLen;
  std::uint64_t seed = 42;
  SftVariant variant = SftVariant::with_emotion;

  void validate() const;
  bool operator==(const SftConfig&) const = default;
};

void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);

/// Sum of next-token NLL over labeled positions and how many there were.
struct MaskedNll {
  double sum = 0.0;
  std::size_t count = 0;
};

/// Label at position t scores the logits at t-1. When `dlogits` is nonempty it
/// receives d(sum / grad_denominator)/d(logits); positions without a label
/// get zero gradient. `grad_denominator` 0 means "use count".
MaskedNll masked_nll(std::span<const double> logits, std::size_t batch, std::size_t seq_len,
                     std::size_t vocab, std::span<const TokenId> labels,
                     std::span<double> dlogits = {}, std::size_t grad_denominator = 0);

/// Mean masked NLL. Throws InvalidArgument when no position is labeled.
double masked_cross_entropy(std::span<const double> logits, std::size_t batch,
                            std::size_t seq_len, std::size_t vocab,
                            std::span<const TokenId> labels);

struct SftBatch {
  TokenBatch tokens;
  std::vector<TokenId> labels;
};

/// Stacks the selected rows, trimmed to the longest unpadded row.
SftBatch make_sft_batch(std::span<const EncodedExample> rows, std::span<const std::size_t> indices);

/// Token-weighted mean masked NLL over the whole split; no parameter updates.
double validate(const GptModel& model, std::span<const EncodedExample> rows,
                std::size_t batch_size = 32);

struct SftEpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr_end = 0.0;
  std::size_t steps = 0;
};

struct SftResult {
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  std::vector<SftEpochLog> history;
};

/// Trains `ckpt.model` in place and leaves it holding the best-validation
/// weights. With `out_dir`, the best checkpoint is written there and every
/// epoch appends a row to metrics.jsonl. Throws DivergenceError on a
/// non-finite training loss.
SftResult train_sft(Checkpoint& ckpt, std::span<const EncodedExample> train,
                    std::span<const EncodedExample> val, const SftConfig& config,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace empathrl
