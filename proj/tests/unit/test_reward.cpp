#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "empathrl/error.hpp"
#include "empathrl/reward.hpp"
#include "empathrl/scorers.hpp"

#include "gen.hpp"

using namespace empathrl;

namespace {

RewardComponents random_components(Rng& rng) {
  return RewardComponents{gen::real(rng, -1, 1), gen::real(rng, -1, 1), gen::real(rng, -1, 1),
                          gen::real(rng, -1, 1), gen::real(rng, -1, 1)};
}

double& component(RewardComponents& c, int k) {
  switch (k) {
    case 0: return c.quality;
    case 1: return c.emotion;
    case 2: return c.relevance;
    case 3: return c.empathy;
    default: return c.sentiment;
  }
}

ScorerRegistry fixed_registry(std::vector<double> embedding, double empathy, SentimentProbabilities sentiment) {
  ScorerRegistry r;
  r.embedding = std::make_shared<FunctionEmbedding>("stub/e", [embedding](std::string_view) { return embedding; });
  r.empathy = std::make_shared<FunctionEmpathy>("stub/p", [empathy](std::string_view) { return empathy; });
  r.sentiment = std::make_shared<FunctionSentiment>("stub/s", [sentiment](std::string_view) { return sentiment; });
  return r;
}

}  // namespace

TEST_SUITE("reward") {

TEST_CASE("default weights") {
  const RewardWeights w;
  CHECK(w.quality == 1.1);
  CHECK(w.emotion == 1.2);
  CHECK(w.relevance == 1.1);
  CHECK(w.empathy == 0.7);
  CHECK(w.sentiment == 0.7);
  CHECK(w.sum() == doctest::Approx(4.8).epsilon(1e-15));
  RewardWeights bad;
  bad.empathy = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("composite reward examples") {
  auto b = composite_reward({0, 0, 0, 0, 0}, {});
  CHECK(b.raw_total == 0.0);
  CHECK(b.scaled_total == 0.0);

  b = composite_reward({1, 1, 1, 1, 1}, {});
  CHECK(b.raw_total == doctest::Approx(4.8).epsilon(1e-15));
  CHECK(b.scaled_total == 10.0);

  b = composite_reward({1, -1, 0, 0, 0}, {});
  CHECK(std::abs(b.raw_total - -0.1) < 1e-12);
  CHECK(std::abs(b.scaled_total - -0.1 * 10 / 4.8) < 1e-12);

  CHECK(composite_reward({-1, -1, -1, -1, -1}, {}).scaled_total == -10.0);
  CHECK_THROWS_AS(composite_reward({1.5, 0, 0, 0, 0}, {}), InvalidArgument);
  CHECK_THROWS_AS(composite_reward({std::nan(""), 0, 0, 0, 0}, {}), InvalidArgument);
}

TEST_CASE("scaled reward is monotone in every component and bounded") {
  Rng rng(51);
  const RewardWeights w;
  for (int i = 0; i < 2000; ++i) {
    auto c = random_components(rng);
    const auto base = composite_reward(c, w);
    CHECK(std::abs(base.scaled_total) <= 10.0);
    const double expected = c.quality * 1.1 + c.emotion * 1.2 + c.relevance * 1.1 + c.empathy * 0.7 + c.sentiment * 0.7;
    CHECK(base.raw_total == doctest::Approx(expected).epsilon(1e-12));
    const int k = static_cast<int>(rng.below(5));
    auto bumped = c;
    component(bumped, k) = gen::real(rng, component(c, k), 1.0);
    CHECK(composite_reward(bumped, w).scaled_total >= base.scaled_total);
  }
}

TEST_CASE("the bound is reached only at a shared extreme") {
  Rng rng(52);
  for (int i = 0; i < 500; ++i) {
    auto c = random_components(rng);
    component(c, static_cast<int>(rng.below(5))) = 0.99;
    CHECK(std::abs(composite_reward(c, {}).scaled_total) < 10.0);
  }
}

TEST_CASE("fluency examples") {
  CHECK(fluency_reward("I hear that this has been hard for you.") == 1.0);
  CHECK(fluency_reward("no no no no no no no no") == -1.0);
  CHECK(fluency_reward("!!! ??? ...") == -1.0);
  CHECK(fluency_reward("") == -1.0);
  CHECK(fluency_reward("okay then") == -1.0);
}

TEST_CASE("fluency stays in range and is deterministic") {
  Rng rng(53);
  for (int i = 0; i < 1000; ++i) {
    const auto text = rng.below(2) ? gen::sentence(rng, 0, 20) : gen::messy_text(rng);
    const double f = fluency_reward(text);
    CHECK(f >= -1.0);
    CHECK(f <= 1.0);
    CHECK(fluency_reward(text) == f);
  }
}

TEST_CASE("emotion reward table") {
  CHECK(emotion_reward(Emotion::sadness, Emotion::sadness, true) == 1.0);
  CHECK(emotion_reward(Emotion::joy, Emotion::sadness, true) == -1.0);
  CHECK(emotion_reward(std::nullopt, Emotion::neutral, false) == -0.5);
  CHECK(emotion_reward(Emotion::fear, Emotion::sadness, true) == 0.4);
  CHECK(emotion_reward(Emotion::neutral, Emotion::anger, true) == -0.2);
  CHECK(emotion_reward(Emotion::joy, Emotion::joy, false) == -0.5);
  for (auto p : kAllEmotions) {
    for (auto t : kAllEmotions) {
      const double r = emotion_reward(p, t, true);
      CHECK(r >= -1.0);
      CHECK(r <= 1.0);
    }
  }
}

TEST_CASE("stub scorers") {
  CHECK(relevance_reward("a", "b", fixed_registry({1, 0}, 0.5, {0.5, 0.5})) == doctest::Approx(1.0).epsilon(1e-6));
  ScorerRegistry ortho = fixed_registry({1, 0}, 0.5, {0.5, 0.5});
  ortho.embedding = std::make_shared<FunctionEmbedding>(
      "stub/o", [](std::string_view t) { return t == "a" ? std::vector<double>{1, 0} : std::vector<double>{0, 1}; });
  CHECK(relevance_reward("a", "b", ortho) == 0.0);
  CHECK(relevance_reward("", "b", ortho) == 0.0);

  CHECK(empathy_reward("x", fixed_registry({1}, 0.5, {})) == 0.0);
  CHECK(empathy_reward("x", fixed_registry({1}, 1.0, {})) == 1.0);
  CHECK(empathy_reward("", fixed_registry({1}, 1.0, {})) == -1.0);
  CHECK(sentiment_reward("x", fixed_registry({1}, 0.5, {0.5, 0.5})) == 0.0);
  CHECK(sentiment_reward("x", fixed_registry({1}, 0.5, {1.0, 0.0})) == 1.0);
  CHECK(sentiment_reward("", fixed_registry({1}, 0.5, {1.0, 0.0})) == -1.0);
  CHECK(stub_registry().describe().at("embedding").is_string());
}

TEST_CASE("lexical scorers order obvious pairs") {
  const auto reg = lexical_registry();
  CHECK(relevance_reward("How did the accident make you feel?", "I keep having flashbacks from the accident", reg) >
        relevance_reward("The weather is sunny in Spain.", "I keep having flashbacks from the accident", reg));
  CHECK(empathy_reward("I understand how hard this is, and your feelings make sense.", reg) >
        empathy_reward("Just get over it, stop complaining.", reg));
  CHECK(sentiment_reward("I'm glad you shared that", reg) > sentiment_reward("This is hopeless", reg));

  Rng rng(54);
  HashedNgramEmbedding emb;
  std::size_t zero = 0;
  for (int i = 0; i < 200; ++i) {
    const auto v = emb.embed(gen::sentence(rng, 1, 10));
    double n = 0.0;
    for (double x : v) n += x * x;
    // Only featureless text (nothing but very short words) embeds to zero.
    if (n == 0.0) {
      ++zero;
      continue;
    }
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(zero < 10);
  CHECK(emb.embed("").size() == 512);
  const auto text = gen::sentence(rng, 3, 6);
  CHECK(relevance_reward(text, text, reg) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("punctuation-only output cannot beat a fluent reply") {
  const RewardEngine engine(RewardConfig{}, lexical_registry());
  RewardInput hack{"!!! ??? ...", Emotion::neutral, true, Emotion::neutral, "I keep having flashbacks"};
  RewardInput fluent{"Would you like to tell me more about the flashbacks?", Emotion::neutral, true,
                     Emotion::neutral, "I keep having flashbacks"};
  CHECK(engine.score(hack).scaled_total < engine.score(fluent).scaled_total);
}

TEST_CASE("audit log records every score") {
  RewardEngine engine(RewardConfig{}, stub_registry());
  const auto path = std::filesystem::temp_directory_path() / "empathrl_reward_audit.jsonl";
  std::filesystem::remove(path);
  engine.set_audit_log(path);
  const std::vector<RewardInput> inputs(3, RewardInput{"I hear you, that sounds hard.", Emotion::sadness, true,
                                                      Emotion::sadness, "i am sad"});
  const auto out = engine.score_batch(inputs);
  CHECK(out.size() == 3);
  std::ifstream in(path);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) {
    const auto row = nlohmann::json::parse(line);
    CHECK(row.at("scaled_total").get<double>() == out[0].scaled_total);
    ++lines;
  }
  CHECK(lines == 3);
  std::filesystem::remove(path);
}

TEST_CASE("reward config round-trips") {
  RewardConfig c;
  c.weights.emotion = 2.0;
  c.scorer_backend = "stub";
  RewardConfig back;
  from_json(nlohmann::json(c), back);
  CHECK(back == c);
  c.scorer_backend = "magic";
  CHECK_THROWS_AS(make_scorer_registry(c), InvalidArgument);
}

TEST_CASE("remote scorers speak the sidecar protocol") {
  httplib::Server server;
  server.Post("/embed", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"embedding": [0.6, 0.8]})", "application/json");
  });
  server.Post("/empathy", [](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    CHECK(body.at("model") == "paragon-analytics/bert_empathy");
    res.set_content(R"({"positive": 0.75})", "application/json");
  });
  server.Post("/sentiment", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"positive": 0.9, "negative": 0.1})", "application/json");
  });
  server.Post("/emotion", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"label": "grief"})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RewardConfig cfg;
  cfg.scorer_backend = "remote";
  cfg.sidecar_url = "http://127.0.0.1:" + std::to_string(port);
  const auto reg = make_scorer_registry(cfg);
  CHECK(relevance_reward("a", "b", reg) == doctest::Approx(1.0));
  CHECK(empathy_reward("a", reg) == doctest::Approx(0.5));
  CHECK(sentiment_reward("a", reg) == doctest::Approx(0.8));
  const auto classifier = make_emotion_classifier(cfg);
  CHECK(classifier->top_label("x") == "grief");
  CHECK(reg.describe().at("empathy") == "paragon-analytics/bert_empathy");

  server.stop();
  thread.join();
  CHECK_THROWS_AS(empathy_reward("a", reg), ScorerError);
}

}  // TEST_SUITE
