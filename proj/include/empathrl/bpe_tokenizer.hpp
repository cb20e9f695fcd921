#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace empathrl {

using TokenId = std::int32_t;

/// Subword tokenizer of the pretrained model, before structural extension.
class BaseTokenizer {
 public:
  virtual ~BaseTokenizer() = default;

  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  /// Ids outside the base vocabulary are skipped.
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual std::size_t vocab_size() const noexcept = 0;
  /// Literal strings of the base vocabulary's special tokens.
  virtual std::vector<std::string> special_tokens() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

std::shared_ptr<const BaseTokenizer> base_tokenizer_from_json(const nlohmann::json& j);

/// GPT-2 style byte-level BPE. Loads the published vocab.json/merges.txt pair
/// or learns merges from a corpus.
class ByteLevelBpe final : public BaseTokenizer {
 public:
  static ByteLevelBpe from_gpt2_files(const std::filesystem::path& vocab_json,
                                      const std::filesystem::path& merges_txt);
  static ByteLevelBpe from_vocab_and_merges(const nlohmann::json& vocab,
                                            std::span<const std::string> merges);
  /// Learns up to `num_merges` merges; ties in pair frequency go to the
  /// lexicographically smallest pair, so training is deterministic.
  static ByteLevelBpe train(std::span<const std::string> corpus, std::size_t num_merges,
                            std::vector<std::string> specials = {"<|endoftext|>"});
  static ByteLevelBpe from_json(const nlohmann::json& j);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const noexcept override { return id_to_bytes_.size(); }
  std::vector<std::string> special_tokens() const override { return specials_; }
  nlohmann::json to_json() const override;

  std::size_t num_merges() const noexcept { return merges_.size(); }

 private:
  ByteLevelBpe() = default;
  void index();
  std::vector<std::string> bpe(std::string_view word) const;

  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, TokenId> bytes_to_id_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
  std::vector<std::string> specials_;
};

/// GPT-2 pre-tokenization (contractions, letter/digit/symbol runs with an
/// optional leading space, whitespace runs). Bytes >= 0x80 count as letters.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Byte <-> printable code point table used by GPT-2 vocabulary files.
std::string bytes_to_unicode_string(std::string_view bytes);

/// Replaces every byte that does not start a well-formed UTF-8 sequence with U+FFFD.
std::string sanitize_utf8(std::string_view bytes);
std::string unicode_string_to_bytes(std::string_view text);

}  // namespace empathrl
