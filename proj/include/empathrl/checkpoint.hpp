#pragma once

#include <filesystem>
#include <string_view>

#include <nlohmann/json.hpp>

#include "empathrl/encoding.hpp"
#include "empathrl/gpt_model.hpp"

namespace empathrl {

/// Files inside a checkpoint directory.
inline constexpr std::string_view kWeightsFile = "weights.bin";
inline constexpr std::string_view kBaseTokenizerFile = "base_tokenizer.json";
inline constexpr std::string_view kTokenizerManifestFile = "tokenizer_manifest.json";
inline constexpr std::string_view kTrainingManifestFile = "training_manifest.json";
inline constexpr std::string_view kMetricsFile = "metrics.jsonl";

struct Checkpoint {
  GptModel model;
  ExtendedTokenizer tokenizer;
  /// config, seed, epoch, val history, code revision, variant, generation config.
  nlohmann::json training_manifest = nlohmann::json::object();
};

/// Short git revision the library was built from.
std::string_view code_revision() noexcept;

/// Writes weights, tokenizer files and training manifest. Creates the
/// directory; leaves an existing metrics.jsonl in place.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);

/// Throws IoError/ParseError when files are missing, the tokenizer manifest
/// disagrees with the stored base tokenizer, or the embedding table does not
/// match the extended vocabulary.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Appends one JSON row to `path`.
void append_jsonl(const std::filesystem::path& path, const nlohmann::json& row);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace empathrl
