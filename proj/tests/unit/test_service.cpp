#include <doctest.h>

#include <httplib.h>

#include <thread>

#include "empathrl/scorers.hpp"
#include "empathrl/service.hpp"
#include "empathrl/sft.hpp"

#include "../support/toy.hpp"

using namespace empathrl;
using nlohmann::json;

namespace {

const Checkpoint& trained() {
  static const Checkpoint ckpt = [] {
    const auto rows = toy::synthetic_corpus(14, 23);
    auto c = toy::make_checkpoint(rows, toy::tiny_shape(1, 32, 2), 120, 6);
    const auto enc = toy::encode_rows(c.tokenizer, rows, true);
    SftConfig cfg;
    cfg.batch_size = 7;
    cfg.max_epochs = 8;
    cfg.learning_rate = 5e-3;
    train_sft(c, enc, enc, cfg);
    return c;
  }();
  return ckpt;
}

const json kRequest{{"problem_type", "grief"}, {"user_text", "i feel so sad today"}, {"user_emotion", "sadness"}};

std::unique_ptr<SuggestionService> ready_service(std::size_t depth = 4, bool with_engine = true) {
  auto s = std::make_unique<SuggestionService>(ServiceOptions{"127.0.0.1", 0, depth});
  GenerationConfig defaults;
  defaults.max_new_tokens = 24;
  s->set_model(trained(), "toy", defaults,
               with_engine ? std::make_shared<RewardEngine>(RewardConfig{}, lexical_registry()) : nullptr);
  return s;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("requests before the model loads get 503") {
  SuggestionService s(ServiceOptions{"127.0.0.1", 0, 4});
  CHECK_FALSE(s.ready());
  const auto [status, body] = s.handle_suggest(kRequest.dump());
  CHECK(status == 503);
  CHECK(body.at("error") == "loading");
}

TEST_CASE("valid request") {
  auto s = ready_service();
  auto req = kRequest;
  req["session_id"] = "abc-123";
  const auto [status, body] = s->handle_suggest(req.dump());
  REQUIRE(status == 200);
  CHECK_FALSE(body.at("suggestion").at("text").get<std::string>().empty());
  CHECK(body.at("disclaimer") == kServiceDisclaimer);
  CHECK(body.at("model_id") == "toy");
  CHECK(body.at("session_id") == "abc-123");
  CHECK(body.at("suggestion").at("reward_breakdown").is_object());
  const auto dumped = body.dump();
  for (auto m : kAllMarkers) CHECK(dumped.find(marker_text(m)) == std::string::npos);

  auto plain = ready_service(4, false);
  const auto [st2, body2] = plain->handle_suggest(kRequest.dump());
  CHECK(st2 == 200);
  CHECK(body2.at("suggestion").at("reward_breakdown").is_null());
}

TEST_CASE("validation errors") {
  auto s = ready_service();
  auto check = [&](const std::string& body, int want_status, const char* want_code) {
    const auto [status, out] = s->handle_suggest(body);
    CAPTURE(body);
    CHECK(status == want_status);
    CHECK(out.at("error") == want_code);
    return out;
  };
  check("{not json", 400, "invalid_json");
  check("[1,2]", 400, "invalid_json");
  check(json{{"user_emotion", "joy"}}.dump(), 400, "invalid_request");
  check(json{{"user_text", 3}, {"user_emotion", "joy"}}.dump(), 400, "invalid_request");
  check(json{{"user_text", "   "}, {"user_emotion", "joy"}}.dump(), 400, "empty_text");
  auto bad = kRequest;
  bad["user_emotion"] = "confused";
  const auto out = check(bad.dump(), 400, "invalid_emotion");
  for (auto e : kAllEmotions) CHECK(out.at("message").get<std::string>().find(to_string(e)) != std::string::npos);
  auto over = kRequest;
  over["overrides"] = {{"top_p", 2.0}};
  check(over.dump(), 400, "invalid_overrides");
  std::string huge;
  for (int i = 0; i < 300; ++i) huge += "sad ";
  auto long_req = kRequest;
  long_req["user_text"] = huge;
  check(long_req.dump(), 422, "context_too_long");
}

TEST_CASE("overrides are applied and greedy output is repeatable") {
  auto s = ready_service();
  auto req = kRequest;
  req["overrides"] = {{"greedy", true}, {"temperature", 0.5}};
  const auto [s1, b1] = s->handle_suggest(req.dump());
  const auto [s2, b2] = s->handle_suggest(req.dump());
  REQUIRE(s1 == 200);
  REQUIRE(s2 == 200);
  CHECK(b1.at("suggestion").at("text") == b2.at("suggestion").at("text"));
  CHECK(b1.at("suggestion").at("gen_config_used").at("temperature") == 0.5);
  CHECK(b1.at("suggestion").at("gen_config_used").at("max_new_tokens") == 24);
}

TEST_CASE("a full queue answers 429") {
  auto s = ready_service(1);
  std::vector<int> statuses(6, 0);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    threads.emplace_back([&, i] { statuses[i] = s->handle_suggest(kRequest.dump()).first; });
  }
  for (auto& t : threads) t.join();
  int ok = 0;
  for (int st : statuses) {
    CHECK((st == 200 || st == 429));
    ok += st == 200;
  }
  CHECK(ok >= 1);
}

TEST_CASE("HTTP routes") {
  SuggestionService s(ServiceOptions{"127.0.0.1", 0, 4});
  const int port = s.start();
  httplib::Client http("127.0.0.1", port);
  auto health = http.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 503);
  CHECK(json::parse(health->body).at("status") == "loading");
  auto early = http.Post("/suggest", kRequest.dump(), "application/json");
  REQUIRE(early);
  CHECK(early->status == 503);

  GenerationConfig defaults;
  defaults.top_p = 0.9;
  defaults.max_new_tokens = 16;
  s.set_model(trained(), "toy-v1", defaults, std::make_shared<RewardEngine>(RewardConfig{}, stub_registry()));
  health = http.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  const auto hb = json::parse(health->body);
  CHECK(hb.at("status") == "ok");
  CHECK(hb.at("model_id") == "toy-v1");
  CHECK(hb.at("uptime_s").get<double>() >= 0.0);

  auto config = http.Get("/config");
  REQUIRE(config);
  CHECK(config->status == 200);
  const auto cb = json::parse(config->body);
  CHECK(cb.at("generation").at("top_p") == 0.9);
  CHECK(cb.at("disclaimer") == kServiceDisclaimer);
  CHECK(cb.at("reward_weights").at("emotion") == 1.2);

  auto ok = http.Post("/suggest", kRequest.dump(), "application/json");
  REQUIRE(ok);
  CHECK(ok->status == 200);
  CHECK(ok->get_header_value("Content-Type").find("application/json") != std::string::npos);
  s.stop();
}

}  // TEST_SUITE
