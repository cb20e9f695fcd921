#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/inference.hpp"
#include "empathrl/judge.hpp"
#include "empathrl/metrics.hpp"
#include "empathrl/ppo.hpp"
#include "empathrl/reward.hpp"
#include "empathrl/sft.hpp"

namespace empathrl {

struct CorpusSection {
  std::string mesc_path;
  std::string esconv_path;
  /// Empty: built-in go_emotions table.
  std::string emotion_map_path;
  std::string out_dir = "runs/data";
  std::size_t coverage_threshold = 128;
};

struct EncodingSection {
  std::size_t max_len = kDefaultMaxLen;
  /// Byte-level BPE merges learned by init-base when no pretrained base is given.
  std::size_t bpe_merges = 256;
};

struct EvalSection {
  std::string bleu_mode = "sentence";
  double bleu_epsilon = 0.1;
  bool meteor = true;
  /// Empty: built-in synonym table.
  std::string synonyms_path;
  std::size_t judge_samples = 100;
  std::string rubric_path = "assets/judge_rubric.txt";
  JudgeEndpoint judge;

  MetricOptions metric_options() const;
};

struct ServeSection {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t queue_depth = 8;
  /// Compute reward breakdowns for suggestions.
  bool reward = true;
};

/// Every section the CLI reads. Keys absent from a config file keep their defaults.
struct PipelineConfig {
  std::uint64_t seed = 42;
  CorpusSection corpus;
  EncodingSection encoding;
  SftConfig sft;
  PpoConfig rl;
  RewardConfig reward;
  GenerationConfig generation;
  GenerationGrid grid{{0.8, 0.9, 1.0}, {0, 20, 50}, {0.7, 1.0}};
  EvalSection eval;
  ServeSection serve;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

/// Applies "section.key=value"; the value is parsed as JSON when it can be,
/// otherwise taken as a string. Unknown sections and keys throw.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Defaults, then the file (if any), then overrides, then `seed`, which is
/// propagated to every seeded section.
PipelineConfig load_pipeline_config(const std::optional<std::filesystem::path>& path,
                                    std::span<const std::string> overrides,
                                    std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace empathrl
