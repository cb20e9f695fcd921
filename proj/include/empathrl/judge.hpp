#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/error.hpp"

namespace empathrl {

inline constexpr std::size_t kJudgeCriteria = 6;

inline constexpr std::array<std::string_view, kJudgeCriteria> kJudgeCriterionNames = {
    "therapeutic_rapport",   "active_understanding",         "relevance_focus",
    "practical_helpfulness", "professional_appropriateness", "emotional_validation",
};

using CriterionScores = std::array<int, kJudgeCriteria>;

/// Raised for failures that retrying cannot fix (bad credentials, exhausted
/// retries on transport errors).
class JudgeError : public Error {
 public:
  using Error::Error;
};

struct JudgeEndpoint {
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-4o-mini";
  std::string api_key_env = "OPENAI_API_KEY";
  /// Extra attempts after the first one.
  std::size_t max_retries = 3;
  double timeout_s = 30.0;
  /// Wait before retrying a transient failure; doubles on each retry.
  double retry_backoff_s = 1.0;
  std::size_t concurrency = 4;
  double temperature = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const JudgeEndpoint& e);
void from_json(const nlohmann::json& j, JudgeEndpoint& e);

/// HTTP status and body of one chat-completion call. status 0 means the
/// request never got a response.
struct ChatReply {
  int status = 0;
  std::string body;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual ChatReply post(const nlohmann::json& request) const = 0;
};

/// POST {base_url}/chat/completions with a bearer token read from the
/// configured environment variable.
class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(JudgeEndpoint endpoint);
  ChatReply post(const nlohmann::json& request) const override;

 private:
  JudgeEndpoint endpoint_;
  std::string api_key_;
};

struct JudgeSample {
  std::string context;
  std::string response;
};

/// Extracts the six scores from a reply message. Accepts a bare JSON object or
/// one embedded in prose; every criterion must be an integer in 1..5.
std::optional<CriterionScores> parse_judge_scores(std::string_view content);

struct JudgeRecord {
  std::size_t index = 0;
  std::string context;
  std::string response;
  std::size_t attempts = 0;
  std::vector<std::string> raw_replies;
  std::optional<CriterionScores> scores;
};

void to_json(nlohmann::json& j, const JudgeRecord& r);

struct JudgeScore {
  /// Means over valid samples, in kJudgeCriterionNames order.
  std::array<double, kJudgeCriteria> means{};
  std::size_t n_samples = 0;
  std::size_t n_valid = 0;
  std::size_t n_invalid = 0;
  /// Attempts beyond the first, summed over samples.
  std::size_t n_retries = 0;
  std::vector<JudgeRecord> records;

  double mean(std::string_view criterion) const;
};

void to_json(nlohmann::json& j, const JudgeScore& s);

std::string load_rubric(const std::filesystem::path& path);

/// One request per sample, bounded retries on malformed replies and
/// transient HTTP failures. Samples still unparseable after the last retry
/// are excluded and counted. 401/403 and exhausted transport retries throw
/// JudgeError.
JudgeScore judge(std::span<const JudgeSample> samples, const ChatClient& client,
                 std::string_view rubric, const JudgeEndpoint& endpoint);

/// One JSON line per record.
void write_judge_raw(const std::filesystem::path& path, const JudgeScore& score);

}  // namespace empathrl
