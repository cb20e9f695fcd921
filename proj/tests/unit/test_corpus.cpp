#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>

#include "empathrl/corpus.hpp"
#include "empathrl/error.hpp"

#include "gen.hpp"

using namespace empathrl;

namespace {

std::string fixture(const char* name) { return std::string(EMPATHRL_SOURCE_DIR) + "/tests/fixtures/" + name; }

DialogueTurn pt(std::string text, Emotion e = Emotion::neutral) { return {Speaker::patient, std::move(text), e}; }
DialogueTurn th(std::string text, Emotion e = Emotion::neutral) { return {Speaker::therapist, std::move(text), e}; }

std::size_t non_space_chars(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return c != ' '; }));
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("strip_metadata examples") {
  CHECK(strip_metadata("I feel lost.") == "I feel lost.");
  CHECK(strip_metadata("The speaker looks down. I feel lost.") == "I feel lost.");
  CHECK(strip_metadata("The emotion state is tense.") == "");
  CHECK(strip_metadata("I said: the speaker is loud.") == "I said: the speaker is loud.");
  CHECK(strip_metadata("Okay! The speaker sighs? Fine.") == "Okay! Fine.");
}

TEST_CASE("strip_metadata is idempotent") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const auto x = gen::messy_text(rng);
    const auto once = strip_metadata(x);
    CAPTURE(x);
    CHECK(strip_metadata(once) == once);
  }
}

TEST_CASE("merge_consecutive_turns examples") {
  const std::vector<DialogueTurn> alternating = {pt("A"), th("B")};
  CHECK(merge_consecutive_turns(alternating) == alternating);

  const std::vector<DialogueTurn> run = {pt("A"), pt("B"), th("C")};
  const std::vector<DialogueTurn> merged = {pt("A B"), th("C")};
  CHECK(merge_consecutive_turns(run) == merged);

  const std::vector<DialogueTurn> emotions = {pt("A", Emotion::sadness), pt("B", Emotion::fear)};
  const auto out = merge_consecutive_turns(emotions);
  REQUIRE(out.size() == 1);
  CHECK(out[0].text == "A B");
  CHECK(out[0].emotion == Emotion::fear);

  CHECK_THROWS_AS(merge_consecutive_turns(std::vector<DialogueTurn>{}), InvalidArgument);
}

TEST_CASE("merge_consecutive_turns alternates and preserves text") {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    std::vector<DialogueTurn> turns(gen::size(rng, 1, 12));
    std::size_t chars = 0;
    for (auto& t : turns) {
      t.speaker = rng.below(2) ? Speaker::patient : Speaker::therapist;
      t.text = gen::sentence(rng);
      t.emotion = gen::emotion(rng);
      chars += non_space_chars(t.text);
    }
    const auto out = merge_consecutive_turns(turns);
    std::size_t out_chars = 0;
    for (std::size_t k = 0; k < out.size(); ++k) {
      if (k > 0) CHECK(out[k].speaker != out[k - 1].speaker);
      out_chars += non_space_chars(out[k].text);
    }
    CHECK(out_chars == chars);
    CHECK(out.back().emotion == turns.back().emotion);
  }
}

TEST_CASE("build_examples counts patient-then-therapist pairs") {
  Dialogue d{"work", {pt("a"), th("b"), pt("c"), th("d")}, Split::train};
  const auto ex = build_examples(d);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0] == DialogueExample{"work", "a", Emotion::neutral, "b", Emotion::neutral});
  CHECK(ex[1].user_text == "c");

  CHECK(build_examples(Dialogue{"x", {pt("only")}, Split::train}).empty());
  CHECK(build_examples(Dialogue{"x", {th("a"), pt("b")}, Split::train}).empty());

  Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    Dialogue g{"p", {}, Split::train};
    const std::size_t n = gen::size(rng, 1, 10);
    for (std::size_t k = 0; k < n; ++k) g.turns.push_back(rng.below(2) ? pt("u") : th("t"));
    std::size_t expected = 0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      expected += g.turns[k].speaker == Speaker::patient && g.turns[k + 1].speaker == Speaker::therapist;
    }
    CHECK(build_examples(g).size() == expected);
  }
}

TEST_CASE("external emotion mapping") {
  CHECK(map_external_emotion("sadness") == Emotion::sadness);
  CHECK(map_external_emotion("grief") == Emotion::sadness);
  CHECK(map_external_emotion("curiosity") == Emotion::neutral);
  CHECK(map_external_emotion("nervousness") == Emotion::fear);
  CHECK(map_external_emotion("annoyance") == Emotion::anger);
  CHECK(map_external_emotion("admiration") == Emotion::joy);
  CHECK(map_external_emotion("no-such-label") == Emotion::neutral);
  CHECK(EmotionMapper::go_emotions_default().table().size() == 28);

  const auto custom = EmotionMapper::from_json(nlohmann::json{{"grief", "depression"}});
  CHECK(map_external_emotion("grief", custom) == Emotion::depression);
  CHECK(map_external_emotion("sadness", custom) == Emotion::neutral);
}

TEST_CASE("external emotion mapping is total and deterministic") {
  Rng rng(14);
  const auto mapper = EmotionMapper::go_emotions_default();
  for (int i = 0; i < 500; ++i) {
    const auto label = gen::messy_text(rng) + gen::sentence(rng, 0, 2);
    CHECK(mapper.map(label) == mapper.map(label));
  }
}

TEST_CASE("corpus_stats") {
  const std::vector<std::size_t> one = {10};
  auto s = corpus_stats(one, 128);
  CHECK(s.coverage_at_threshold == 1.0);
  CHECK(s.token_length_mean == 10.0);
  CHECK(s.token_length_median == 10.0);

  const std::vector<std::size_t> two = {100, 200};
  CHECK(corpus_stats(two, 128).coverage_at_threshold == 0.5);
  CHECK(corpus_stats(two, 128).token_length_median == 150.0);

  CHECK_THROWS_AS(corpus_stats(std::vector<std::size_t>{}, 128), InvalidArgument);

  Rng rng(15);
  for (int i = 0; i < 300; ++i) {
    std::vector<std::size_t> lens(gen::size(rng, 1, 40));
    for (auto& l : lens) l = gen::size(rng, 1, 300);
    double prev = -1.0;
    for (std::size_t t = 0; t <= 320; t += 16) {
      const double cov = corpus_stats(lens, t).coverage_at_threshold;
      CHECK(cov >= prev);
      CHECK(cov >= 0.0);
      CHECK(cov <= 1.0);
      prev = cov;
    }
  }
}

TEST_CASE("toy MESC fixture preprocesses") {
  const auto dialogues = load_mesc(fixture("toy_mesc.json"));
  REQUIRE(dialogues.size() == 14);
  std::size_t examples = 0;
  for (const auto& d : dialogues) {
    PreprocessSummary summary;
    for (const auto& ex : preprocess_dialogue(d, &summary)) {
      CHECK_FALSE(ex.user_text.empty());
      CHECK_FALSE(ex.therapist_text.empty());
      CHECK(ex.user_text.find("The speaker") == std::string::npos);
      CHECK(ex.user_text.find("The emotion state") == std::string::npos);
      ++examples;
    }
  }
  CHECK(examples > dialogues.size());
}

TEST_CASE("examples round-trip through jsonl") {
  const auto dir = std::filesystem::temp_directory_path() / "empathrl_corpus_test";
  std::filesystem::create_directories(dir);
  const std::vector<DialogueExample> rows = {
      {"grief", "line \"one\"", Emotion::sadness, "reply\nwith newline", Emotion::neutral},
      {"", "u", Emotion::joy, "t", Emotion::joy},
  };
  write_examples_jsonl(dir / "ex.jsonl", rows);
  CHECK(read_examples_jsonl(dir / "ex.jsonl") == rows);
  std::filesystem::remove_all(dir);
}

TEST_CASE("toy ESConv fixture parses") {
  const auto convs = load_esconv(fixture("toy_esconv.json"));
  CHECK(convs.size() == 4);
  for (const auto& c : convs) CHECK(c.speakers.size() == c.utterances.size());
}

TEST_CASE("full MESC train split" * doctest::skip(std::getenv("EMPATHRL_MESC_PATH") == nullptr)) {
  const auto dialogues = load_mesc(std::getenv("EMPATHRL_MESC_PATH"));
  std::size_t train_dialogues = 0, train_examples = 0;
  for (const auto& d : dialogues) {
    if (d.split != Split::train) continue;
    ++train_dialogues;
    train_examples += preprocess_dialogue(d).size();
  }
  CHECK(train_dialogues == 815);
  CHECK(train_examples > 815);
}

TEST_CASE("full ESConv corpus" * doctest::skip(std::getenv("EMPATHRL_ESCONV_PATH") == nullptr)) {
  CHECK(load_esconv(std::getenv("EMPATHRL_ESCONV_PATH")).size() == 1300);
}

}  // TEST_SUITE
