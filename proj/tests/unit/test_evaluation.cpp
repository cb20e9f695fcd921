#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "empathrl/checkpoint.hpp"
#include "empathrl/error.hpp"
#include "empathrl/metrics.hpp"
#include "empathrl/report.hpp"
#include "empathrl/scorers.hpp"

#include "../support/toy.hpp"
#include "gen.hpp"

using namespace empathrl;

namespace {

const nlohmann::json& oracle() {
  static const auto doc = read_json_file(std::string(EMPATHRL_SOURCE_DIR) + "/tests/fixtures/metric_oracle.json");
  return doc;
}

std::vector<std::string> toks(std::string_view s) { return metric_tokens(s); }

struct Corpus {
  std::vector<std::string> cands, refs;
};

Corpus random_corpus(Rng& rng) {
  Corpus c;
  const std::size_t n = gen::size(rng, 1, 8);
  for (std::size_t i = 0; i < n; ++i) {
    c.cands.push_back(gen::sentence(rng, 1, 10));
    c.refs.push_back(rng.below(4) == 0 ? c.cands.back() : gen::sentence(rng, 1, 10));
  }
  return c;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("metric tokenization") {
  const std::vector<std::string> want = {"i", "'", "m", "fine", ",", "thanks", "!"};
  CHECK(metric_tokens("I'm  Fine, thanks!") == want);
  CHECK(metric_tokens("   ").empty());
}

TEST_CASE("BLEU hand examples") {
  const auto cand = toks("the the the the the the the");
  const auto ref = toks("the cat is on the mat");
  CHECK(modified_precision(cand, ref, 1) == std::pair<std::size_t, std::size_t>{2, 7});
  CHECK(sentence_bleu(toks("the cat sat on the mat"), toks("the cat sat on the mat")) == doctest::Approx(1.0));
  CHECK(sentence_bleu(toks("yes indeed"), toks("yes indeed")) == doctest::Approx(1.0));
  CHECK(sentence_bleu(toks("apple banana"), toks("car dog")) == 0.0);
  CHECK_THROWS_AS(bleu(std::vector<std::string>{"a"}, std::vector<std::string>{}, BleuMode::sentence_mean),
                  InvalidArgument);
}

TEST_CASE("ROUGE and METEOR hand examples") {
  CHECK(rouge_l_f1(toks("the cat sat"), toks("the cat ate")) == doctest::Approx(2.0 / 3.0));
  const auto same = toks("i hear how heavy this feels");
  CHECK(rouge_n_f1(same, same, 1) == 1.0);
  CHECK(rouge_n_f1(same, same, 2) == 1.0);
  CHECK(rouge_l_f1(same, same) == 1.0);
  CHECK(rouge_n_f1(toks("a b"), toks("c d"), 1) == 0.0);
  CHECK(single_meteor(toks("a b"), toks("c d")) == 0.0);
  CHECK(single_meteor(same, same) > 0.9);
}

TEST_CASE("metrics match the reference implementation fixtures") {
  const auto& doc = oracle();
  const double eps = doc.at("bleu_epsilon").get<double>();
  std::vector<std::string> cands, refs;
  for (const auto& row : doc.at("pairs")) {
    const auto c = row.at("candidate").get<std::string>();
    const auto r = row.at("reference").get<std::string>();
    cands.push_back(c);
    refs.push_back(r);
    CAPTURE(c);
    CAPTURE(r);
    const auto ct = toks(c), rt = toks(r);
    CHECK(std::abs(sentence_bleu(ct, rt, eps) - row.at("bleu").get<double>()) < 1e-6);
    CHECK(std::abs(rouge_n_f1(ct, rt, 1) - row.at("rouge1").get<double>()) < 1e-6);
    CHECK(std::abs(rouge_n_f1(ct, rt, 2) - row.at("rouge2").get<double>()) < 1e-6);
    CHECK(std::abs(rouge_l_f1(ct, rt) - row.at("rougeL").get<double>()) < 1e-6);
    CHECK(std::abs(single_meteor(ct, rt) - row.at("meteor").get<double>()) < 1e-3);
  }
  CHECK(doc.at("pairs").size() >= 10);
  CHECK(std::abs(bleu(cands, refs, BleuMode::corpus, eps) - doc.at("corpus_bleu").get<double>()) < 1e-6);
}

TEST_CASE("Porter stemmer matches the reference word list") {
  for (const auto& pair : oracle().at("porter")) {
    const auto word = pair.at(0).get<std::string>();
    CAPTURE(word);
    CHECK(porter_stem(word) == pair.at(1).get<std::string>());
  }
}

TEST_CASE("metrics are invariant to corpus order") {
  Rng rng(81);
  for (int i = 0; i < 200; ++i) {
    auto c = random_corpus(rng);
    const auto before = lexical_metrics(c.cands, c.refs);
    const double corpus_before = bleu(c.cands, c.refs, BleuMode::corpus);
    for (std::size_t k = c.cands.size(); k > 1; --k) {
      const auto j = static_cast<std::size_t>(rng.below(k));
      std::swap(c.cands[k - 1], c.cands[j]);
      std::swap(c.refs[k - 1], c.refs[j]);
    }
    const auto after = lexical_metrics(c.cands, c.refs);
    CHECK(after.bleu == doctest::Approx(before.bleu).epsilon(1e-12));
    CHECK(after.rouge1 == doctest::Approx(before.rouge1).epsilon(1e-12));
    CHECK(after.rouge2 == doctest::Approx(before.rouge2).epsilon(1e-12));
    CHECK(after.rougeL == doctest::Approx(before.rougeL).epsilon(1e-12));
    CHECK(after.meteor == doctest::Approx(before.meteor).epsilon(1e-12));
    CHECK(bleu(c.cands, c.refs, BleuMode::corpus) == doctest::Approx(corpus_before).epsilon(1e-12));
  }
}

TEST_CASE("appending an identical pair gives the recomputed mean") {
  Rng rng(82);
  for (int i = 0; i < 100; ++i) {
    auto c = random_corpus(rng);
    const auto before = lexical_metrics(c.cands, c.refs);
    const auto copy = gen::sentence(rng, 2, 8);
    c.cands.push_back(copy);
    c.refs.push_back(copy);
    const auto after = lexical_metrics(c.cands, c.refs);
    const double n = static_cast<double>(c.cands.size());
    CHECK(after.bleu == doctest::Approx((before.bleu * (n - 1) + 1.0) / n).epsilon(1e-12));
    CHECK(after.rougeL == doctest::Approx((before.rougeL * (n - 1) + 1.0) / n).epsilon(1e-12));
  }
}

TEST_CASE("emotion accuracy") {
  const std::vector<Emotion> gold = {Emotion::joy, Emotion::fear, Emotion::anger};
  std::vector<std::optional<Emotion>> pred = {Emotion::joy, Emotion::fear, Emotion::anger};
  CHECK(emotion_accuracy(pred, gold) == 1.0);
  pred[2] = Emotion::joy;
  CHECK(emotion_accuracy(pred, gold) == doctest::Approx(0.6667).epsilon(1e-4));
  pred[2] = std::nullopt;
  CHECK(emotion_accuracy(pred, gold) == doctest::Approx(2.0 / 3.0));

  Rng rng(83);
  for (int i = 0; i < 200; ++i) {
    std::vector<Emotion> p(gen::size(rng, 1, 20));
    for (auto& e : p) e = gen::emotion(rng);
    const std::vector<std::optional<Emotion>> present(p.begin(), p.end());
    CHECK(emotion_accuracy(present, p) == 1.0);
  }
}

TEST_CASE("report for an identical corpus") {
  std::vector<EvalOutput> outputs;
  Rng rng(84);
  for (int i = 0; i < 10; ++i) {
    const auto s = gen::sentence(rng, 2, 9);
    outputs.push_back(EvalOutput{"ctx", s, s, Emotion::joy, Emotion::joy});
  }
  const auto r = build_report("m", DatasetId::mesc_test, outputs);
  CHECK(r.bleu == doctest::Approx(1.0));
  CHECK(r.rouge1 == doctest::Approx(1.0));
  CHECK(r.rouge2 == doctest::Approx(1.0));
  CHECK(r.rougeL == doctest::Approx(1.0));
  CHECK(r.emotion_accuracy == 1.0);
  CHECK(r.n_samples == 10);
  CHECK_THROWS_AS(build_report("m", DatasetId::esconv, std::vector<EvalOutput>{}), InvalidArgument);
}

TEST_CASE("report serialization round-trips") {
  EvalReport r;
  r.model_id = "rl-42";
  r.dataset_id = DatasetId::esconv;
  r.bleu = 0.125;
  r.rouge1 = 0.5;
  r.rouge2 = 0.25;
  r.rougeL = 0.375;
  r.meteor = 0.0625;
  r.emotion_accuracy = 0.75;
  r.n_samples = 100;
  JudgeScore js;
  js.means = {1, 2, 3, 4, 5, 1.5};
  js.n_samples = 4;
  js.n_valid = 3;
  js.n_invalid = 1;
  js.n_retries = 2;
  r.judge = js;
  EvalReport back;
  from_json(nlohmann::json(r), back);
  CHECK(nlohmann::json(back) == nlohmann::json(r));
  CHECK(back.judge->mean("relevance_focus") == 3.0);

  CHECK(parse_dataset_id("mesc-test") == DatasetId::mesc_test);
  CHECK(parse_dataset_id("esconv") == DatasetId::esconv);
  CHECK_THROWS_AS(parse_dataset_id("other"), InvalidArgument);
}

TEST_CASE("ESConv examples take emotions from the classifier") {
  EsconvConversation conv{"sleep", "s", {Speaker::patient, Speaker::patient, Speaker::therapist, Speaker::patient},
                          {"I cannot sleep.", "Every night.", "That sounds exhausting.", "Yes."}};
  const FunctionEmotionClassifier sad("stub", [](std::string_view) { return "sadness"; });
  const auto ex = esconv_examples(std::vector<EsconvConversation>{conv}, sad, EmotionMapper::go_emotions_default());
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].user_text == "I cannot sleep. Every night.");
  CHECK(ex[0].user_emotion == Emotion::sadness);
  CHECK(ex[0].therapist_emotion == Emotion::sadness);

  const FunctionEmotionClassifier odd("stub", [](std::string_view) { return "bewilderment"; });
  const auto ex2 = esconv_examples(std::vector<EsconvConversation>{conv}, odd, EmotionMapper::go_emotions_default());
  CHECK(ex2[0].therapist_emotion == Emotion::neutral);

  const auto labels = annotate_esconv_emotions(conv.utterances, sad, EmotionMapper::go_emotions_default());
  CHECK(labels.size() == 4);
}

TEST_CASE("a hundred held-out samples produce a report") {
  const auto rows = toy::synthetic_corpus(100, 7);
  const auto ckpt = toy::make_checkpoint(rows, toy::tiny_shape(1, 16, 2), 60, 4);
  GenerationConfig cfg;
  cfg.max_new_tokens = 4;
  const auto outputs = generate_outputs(ckpt, rows, cfg);
  REQUIRE(outputs.size() == 100);
  CHECK(outputs[0].reference == rows[0].therapist_text);
  CHECK(generate_outputs(ckpt, std::span(rows).first(3), cfg)[2].candidate == outputs[2].candidate);
  const auto report = build_report("toy", DatasetId::mesc_test, outputs);
  CHECK(report.n_samples == 100);

  const auto dir = std::filesystem::temp_directory_path() / "empathrl_report_test";
  std::filesystem::remove_all(dir);
  write_reports(dir, std::vector<EvalReport>{report});
  CHECK(read_json_file(dir / "eval_report.json").size() == 1);
  std::ifstream tables(dir / "tables.md");
  std::stringstream text;
  text << tables.rdbuf();
  CHECK(text.str().find("toy") != std::string::npos);
  CHECK(text.str() == render_tables(std::vector<EvalReport>{report}));
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
