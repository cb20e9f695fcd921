#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>

#include "empathrl/judge.hpp"

#include "../support/mock_chat.hpp"

using namespace empathrl;
using nlohmann::json;

namespace {

std::string completion(const std::string& content) {
  return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}.dump();
}

/// In-process client replaying a scripted list of replies, last one repeated.
class ScriptedClient final : public ChatClient {
 public:
  explicit ScriptedClient(std::vector<ChatReply> script) : script_(std::move(script)) {}
  ChatReply post(const json& request) const override {
    std::lock_guard lock(mutex_);
    last_request_ = request;
    const auto i = std::min(calls_++, script_.size() - 1);
    return script_[i];
  }
  std::size_t calls() const { return calls_; }
  json last_request() const { return last_request_; }

 private:
  std::vector<ChatReply> script_;
  mutable std::mutex mutex_;
  mutable std::size_t calls_ = 0;
  mutable json last_request_;
};

JudgeEndpoint fast_endpoint() {
  JudgeEndpoint ep;
  ep.max_retries = 2;
  ep.retry_backoff_s = 0.0;
  ep.concurrency = 1;
  return ep;
}

const std::vector<JudgeSample> kOne = {{"I feel lost", "Tell me more about that."}};

}  // namespace

TEST_SUITE("judge") {

TEST_CASE("score parsing") {
  const auto all3 = toy::scores_json(3, 3, 3, 3, 3, 3);
  auto s = parse_judge_scores(all3);
  REQUIRE(s.has_value());
  for (int v : *s) CHECK(v == 3);

  s = parse_judge_scores("Here you go:\n```json\n" + toy::scores_json(1, 2, 3, 4, 5, 1) + "\n```\nThanks.");
  REQUIRE(s.has_value());
  CHECK((*s)[4] == 5);

  CHECK_FALSE(parse_judge_scores("not a score").has_value());
  CHECK_FALSE(parse_judge_scores(toy::scores_json(3, 3, 3, 3, 3, 6)).has_value());
  CHECK_FALSE(parse_judge_scores(toy::scores_json(0, 3, 3, 3, 3, 3)).has_value());
  CHECK_FALSE(parse_judge_scores(R"({"therapeutic_rapport": 3})").has_value());
  auto fractional = json::parse(all3);
  fractional["relevance_focus"] = 2.5;
  CHECK_FALSE(parse_judge_scores(fractional.dump()).has_value());
}

TEST_CASE("all-three replies aggregate to three") {
  toy::MockChatServer server([](const std::string&, int) { return toy::scores_json(3, 3, 3, 3, 3, 3); });
  JudgeEndpoint ep = fast_endpoint();
  ep.base_url = server.base_url();
  ep.concurrency = 3;
  std::vector<JudgeSample> samples;
  for (int i = 0; i < 10; ++i) samples.push_back({"ctx " + std::to_string(i), "reply"});
  const auto score = judge(samples, HttpChatClient(ep), "rubric", ep);
  for (double m : score.means) CHECK(m == 3.0);
  CHECK(score.n_valid == 10);
  CHECK(score.n_samples == 10);
  CHECK(server.requests() == 10);
  CHECK(score.mean("emotional_validation") == 3.0);
}

TEST_CASE("malformed reply then a valid retry") {
  ScriptedClient client({{200, completion("I think it is good")}, {200, completion(toy::scores_json(4, 4, 4, 4, 4, 4))}});
  const auto score = judge(kOne, client, "rubric", fast_endpoint());
  CHECK(score.n_valid == 1);
  CHECK(score.n_retries == 1);
  CHECK(score.records[0].attempts == 2);
  CHECK(score.records[0].raw_replies.size() == 2);
  CHECK(score.means[0] == 4.0);
}

TEST_CASE("persistently malformed samples are excluded") {
  ScriptedClient client({{200, completion("nope")}});
  const auto score = judge(kOne, client, "rubric", fast_endpoint());
  CHECK(score.n_valid == 0);
  CHECK(score.n_invalid == 1);
  CHECK(client.calls() == 3);
  for (double m : score.means) CHECK(m == 0.0);
}

TEST_CASE("transient HTTP failures are retried") {
  ScriptedClient client({{503, "{}"}, {429, "{}"}, {200, completion(toy::scores_json(2, 2, 2, 2, 2, 2))}});
  const auto score = judge(kOne, client, "rubric", fast_endpoint());
  CHECK(score.n_valid == 1);
  CHECK(score.n_retries == 2);
}

TEST_CASE("exhausted transport retries and bad credentials raise") {
  ScriptedClient down({{0, "connection refused"}});
  CHECK_THROWS_AS(judge(kOne, down, "rubric", fast_endpoint()), JudgeError);
  CHECK(down.calls() == 3);

  ScriptedClient denied({{401, "{}"}});
  CHECK_THROWS_AS(judge(kOne, denied, "rubric", fast_endpoint()), JudgeError);
  CHECK(denied.calls() == 1);
}

TEST_CASE("request carries the rubric, the sample and the model settings") {
  ScriptedClient client({{200, completion(toy::scores_json(5, 5, 5, 5, 5, 5))}});
  JudgeEndpoint ep = fast_endpoint();
  ep.model = "judge-model";
  judge(kOne, client, "THE RUBRIC", ep);
  const auto req = client.last_request();
  CHECK(req.at("model") == "judge-model");
  CHECK(req.at("temperature") == 0.0);
  CHECK(req.at("messages").at(0).at("content") == "THE RUBRIC");
  const auto user = req.at("messages").at(1).at("content").get<std::string>();
  CHECK(user.find("I feel lost") != std::string::npos);
  CHECK(user.find("Tell me more about that.") != std::string::npos);
}

TEST_CASE("unreachable endpoint over HTTP") {
  JudgeEndpoint ep = fast_endpoint();
  ep.base_url = "http://127.0.0.1:1/v1";
  ep.timeout_s = 1;
  ep.max_retries = 0;
  CHECK_THROWS_AS(judge(kOne, HttpChatClient(ep), "rubric", ep), JudgeError);
}

TEST_CASE("raw records are written one per line") {
  ScriptedClient client({{200, completion(toy::scores_json(1, 2, 3, 4, 5, 1))}});
  std::vector<JudgeSample> samples(4, kOne[0]);
  const auto score = judge(samples, client, "rubric", fast_endpoint());
  const auto path = std::filesystem::temp_directory_path() / "empathrl_judge_raw.jsonl";
  write_judge_raw(path, score);
  std::ifstream in(path);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) CHECK(json::parse(line).at("scores").is_object());
  CHECK(lines == 4);
  std::filesystem::remove(path);
}

TEST_CASE("shipped rubric names every criterion") {
  const auto rubric = load_rubric(std::string(EMPATHRL_SOURCE_DIR) + "/assets/judge_rubric.txt");
  for (auto name : kJudgeCriterionNames) CHECK(rubric.find(name) != std::string::npos);
  CHECK_THROWS(load_rubric("/nonexistent/rubric.txt"));
}

TEST_CASE("endpoint settings round-trip") {
  JudgeEndpoint ep;
  ep.model = "m";
  ep.max_retries = 7;
  JudgeEndpoint back;
  from_json(json(ep), back);
  CHECK(json(back) == json(ep));
  ep.concurrency = 0;
  CHECK_THROWS(ep.validate());
}

}  // TEST_SUITE
