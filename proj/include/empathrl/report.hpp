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
#include "empathrl/corpus.hpp"
#include "empathrl/inference.hpp"
#include "empathrl/judge.hpp"
#include "empathrl/metrics.hpp"
#include "empathrl/scorers.hpp"

namespace empathrl {

enum class DatasetId : std::uint8_t { mesc_test, esconv };

std::string_view to_string(DatasetId d) noexcept;
/// Accepts "mesc_test"/"mesc-test" and "esconv".
DatasetId parse_dataset_id(std::string_view s);

/// One generated response next to its reference.
struct EvalOutput {
  std::string context;
  std::string candidate;
  std::string reference;
  std::optional<Emotion> predicted_emotion;
  Emotion gold_emotion = Emotion::neutral;
};

void to_json(nlohmann::json& j, const EvalOutput& o);
void from_json(const nlohmann::json& j, EvalOutput& o);

struct EvalReport {
  std::string model_id;
  DatasetId dataset_id = DatasetId::mesc_test;
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double meteor = 0.0;
  double emotion_accuracy = 0.0;
  std::size_t n_samples = 0;
  std::optional<JudgeScore> judge;
};

void to_json(nlohmann::json& j, const EvalReport& r);
/// Judge aggregates are restored without per-sample records.
void from_json(const nlohmann::json& j, EvalReport& r);

/// Generates one response per example with per-example seeds derived from cfg.seed.
std::vector<EvalOutput> generate_outputs(const Checkpoint& ckpt, std::span<const DialogueExample> examples,
                                         const GenerationConfig& cfg);

/// One EvalOutput per line, as written next to every evaluation report.
std::vector<EvalOutput> read_outputs_jsonl(const std::filesystem::path& path);

/// Lexical metrics and emotion accuracy over `outputs`. Throws on empty input.
EvalReport build_report(std::string model_id, DatasetId dataset, std::span<const EvalOutput> outputs,
                        const MetricOptions& options = {});

/// Seeker/supporter pairs with utterance emotions supplied by `classifier`
/// through `mapper`. Consecutive same-speaker utterances are merged first.
std::vector<DialogueExample> esconv_examples(std::span<const EsconvConversation> conversations,
                                             const EmotionClassifier& classifier,
                                             const EmotionMapper& mapper);

/// Markdown tables: lexical metrics, emotion accuracy, and judge scores for
/// reports that carry them.
std::string render_tables(std::span<const EvalReport> reports);

/// Writes eval_report.json (array of reports), tables.md, and judge_raw.jsonl
/// when a report carries judge records.
void write_reports(const std::filesystem::path& dir, std::span<const EvalReport> reports);

}  // namespace empathrl
