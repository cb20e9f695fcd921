#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/bpe_tokenizer.hpp"
#include "empathrl/corpus.hpp"
#include "empathrl/emotion.hpp"

namespace empathrl {

inline constexpr TokenId kIgnoreIndex = -100;
inline constexpr std::size_t kDefaultMaxLen = 128;

enum class Marker : std::uint8_t {
  bos,
  eos,
  pad,
  problem,
  user,
  user_emotion,
  therapist,
  therapist_emotion,
};

inline constexpr std::array<Marker, 8> kAllMarkers = {
    Marker::bos,  Marker::eos,          Marker::pad,       Marker::problem,
    Marker::user, Marker::user_emotion, Marker::therapist, Marker::therapist_emotion,
};

/// "<bos>", "<therapist_emotion>", ...
std::string_view marker_text(Marker m) noexcept;

/// Base tokenizer plus 8 structural markers and 7 atomic emotion tokens,
/// appended in that order after the base vocabulary.
class ExtendedTokenizer {
 public:
  static constexpr std::size_t kAddedTokens = kAllMarkers.size() + kAllEmotions.size();

  /// Throws InvalidArgument if an added token collides with a base special.
  static ExtendedTokenizer extend(std::shared_ptr<const BaseTokenizer> base);

  TokenId id(Marker m) const noexcept;
  TokenId id(Emotion e) const noexcept;
  std::optional<Emotion> emotion_of(TokenId id) const noexcept;
  std::optional<Marker> marker_of(TokenId id) const noexcept;
  bool is_added(TokenId id) const noexcept;

  std::size_t base_vocab_size() const noexcept { return base_size_; }
  std::size_t total_vocab_size() const noexcept { return base_size_ + kAddedTokens; }
  const BaseTokenizer& base() const noexcept { return *base_; }
  std::shared_ptr<const BaseTokenizer> base_ptr() const noexcept { return base_; }

  /// Plain text through the base tokenizer; never yields added tokens.
  std::vector<TokenId> encode_text(std::string_view text) const;

  /// Markup: the 8 marker strings are atomic anywhere; an emotion word is
  /// atomic only directly after <user_emotion> or <therapist_emotion>.
  std::vector<TokenId> encode(std::string_view markup) const;

  /// Markers render as their literal strings, emotion tokens as their word.
  std::string decode(std::span<const TokenId> ids) const;
  /// Like decode, but drops every structural marker.
  std::string decode_text(std::span<const TokenId> ids) const;

  /// The added tokens in order with their ids.
  nlohmann::json manifest() const;
  /// Throws ParseError when `manifest` disagrees with this tokenizer.
  void verify_manifest(const nlohmann::json& manifest) const;

 private:
  explicit ExtendedTokenizer(std::shared_ptr<const BaseTokenizer> base);

  std::shared_ptr<const BaseTokenizer> base_;
  std::size_t base_size_ = 0;
};

/// C_i: problem type, user utterance and user emotion.
struct PromptContext {
  std::string problem_type;
  std::string user_text;
  Emotion user_emotion = Emotion::neutral;
};

PromptContext context_of(const DialogueExample& ex);

struct EncodedExample {
  std::vector<TokenId> token_ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<TokenId> labels;

  /// Number of non-pad positions.
  std::size_t length() const noexcept;
  std::size_t labeled_count() const noexcept;
};

void to_json(nlohmann::json& j, const EncodedExample& ex);
void from_json(const nlohmann::json& j, EncodedExample& ex);

/// Unpadded token sequence in the training layout:
/// <bos><problem>P<user>U<user_emotion>E<therapist>T[<therapist_emotion>E']<eos>
std::vector<TokenId> training_sequence(const ExtendedTokenizer& tok, const DialogueExample& ex,
                                       bool include_therapist_emotion);

/// Padded, labeled example. Returns nullopt when the sequence exceeds
/// `max_len` (sequence filtering). Throws ContextTooLong when the prompt alone
/// leaves no room for a single response token.
std::optional<EncodedExample> encode_example(const ExtendedTokenizer& tok,
                                             const DialogueExample& ex,
                                             bool include_therapist_emotion,
                                             std::size_t max_len = kDefaultMaxLen);

/// <bos> C_i <therapist>, unpadded. Throws ContextTooLong unless shorter than max_len.
std::vector<TokenId> build_inference_prompt(const ExtendedTokenizer& tok, const PromptContext& ctx,
                                            std::size_t max_len = kDefaultMaxLen);

struct GenerationResult {
  std::string therapist_text;
  std::optional<Emotion> therapist_emotion;
  bool terminated_by_eos = false;
  std::vector<TokenId> raw_token_ids;
};

/// Splits generated tokens into response text and the emotion after the
/// <therapist_emotion> marker. Total: malformed tails give no emotion.
GenerationResult parse_generation(const ExtendedTokenizer& tok, std::span<const TokenId> generated);

void write_encoded_jsonl(const std::filesystem::path& path, std::span<const EncodedExample> rows);
std::vector<EncodedExample> read_encoded_jsonl(const std::filesystem::path& path);

}  // namespace empathrl
