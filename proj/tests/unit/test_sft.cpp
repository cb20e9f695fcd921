#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "empathrl/checkpoint.hpp"
#include "empathrl/error.hpp"
#include "empathrl/inference.hpp"
#include "empathrl/optim.hpp"
#include "empathrl/sft.hpp"

#include "../support/toy.hpp"
#include "gen.hpp"

using namespace empathrl;

namespace {

SftConfig quick_config(std::size_t epochs) {
  SftConfig c;
  c.batch_size = 4;
  c.max_epochs = epochs;
  c.learning_rate = 3e-3;
  c.seed = 5;
  return c;
}

struct Fixture {
  std::vector<DialogueExample> rows = toy::synthetic_corpus(14, 2);
  Checkpoint ckpt = toy::make_checkpoint(rows, toy::tiny_shape(1, 32, 2), 120, 3);
  std::vector<EncodedExample> train = toy::encode_rows(ckpt.tokenizer, rows, true);
};

}  // namespace

TEST_SUITE("training_sft") {

TEST_CASE("defaults match the published fine-tuning table") {
  const SftConfig c;
  CHECK(c.learning_rate == 2e-5);
  CHECK(c.batch_size == 32);
  CHECK(c.warmup_ratio == 0.1);
  CHECK(c.max_epochs == 20);
  CHECK(c.early_stop_epoch == 10);
  CHECK(c.validate_every_epochs == 1);
  CHECK(c.optimizer == "adamw");
  CHECK(c.loss == "cross_entropy");
  CHECK(c.max_len == 128);
  CHECK_NOTHROW(c.validate());

  SftConfig back;
  from_json(nlohmann::json(c), back);
  CHECK(back == c);
  CHECK(parse_sft_variant("no-emotion") == SftVariant::no_emotion);
  CHECK_THROWS_AS(parse_sft_variant("both"), InvalidArgument);
}

TEST_CASE("masked cross entropy examples") {
  const std::size_t V = 50272;
  std::vector<double> logits(2 * V, 0.0);
  const std::vector<TokenId> labels = {kIgnoreIndex, 17};
  CHECK(masked_cross_entropy(logits, 1, 2, V, labels) == doctest::Approx(std::log(50272.0)).epsilon(1e-12));
  CHECK(std::log(50272.0) == doctest::Approx(10.825).epsilon(1e-4));

  std::vector<double> sharp(2 * 5, -1e4);
  sharp[3] = 0.0;
  CHECK(masked_cross_entropy(sharp, 1, 2, 5, std::vector<TokenId>{kIgnoreIndex, 3}) == doctest::Approx(0.0));

  CHECK_THROWS_AS(masked_cross_entropy(logits, 1, 2, V, std::vector<TokenId>{kIgnoreIndex, kIgnoreIndex}),
                  InvalidArgument);
}

TEST_CASE("masked cross entropy ignores logits at unscored positions") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t B = gen::size(rng, 1, 3), T = gen::size(rng, 2, 6), V = gen::size(rng, 2, 9);
    std::vector<double> logits(B * T * V);
    for (auto& z : logits) z = rng.normal(0.0, 3.0);
    std::vector<TokenId> labels(B * T, kIgnoreIndex);
    labels[T - 1] = static_cast<TokenId>(rng.below(V));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (i % T != 0 && rng.below(2)) labels[i] = static_cast<TokenId>(rng.below(V));
    }
    const double before = masked_cross_entropy(logits, B, T, V, labels);
    auto perturbed = logits;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < T; ++t) {
        const bool scored = t + 1 < T && labels[b * T + t + 1] != kIgnoreIndex;
        if (scored) continue;
        for (std::size_t v = 0; v < V; ++v) perturbed[(b * T + t) * V + v] += rng.normal(0.0, 10.0);
      }
    }
    CHECK(masked_cross_entropy(perturbed, B, T, V, labels) == before);
  }
}

TEST_CASE("masked NLL gradient matches finite differences") {
  Rng rng(42);
  const std::size_t B = 2, T = 4, V = 6;
  std::vector<double> logits(B * T * V);
  for (auto& z : logits) z = rng.normal();
  const std::vector<TokenId> labels = {kIgnoreIndex, 2, 5, kIgnoreIndex, kIgnoreIndex, kIgnoreIndex, 1, 0};
  std::vector<double> grad(logits.size(), 0.0);
  const auto nll = masked_nll(logits, B, T, V, labels, grad);
  CHECK(nll.count == 4);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    auto up = logits, down = logits;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double numeric = (masked_nll(up, B, T, V, labels).sum - masked_nll(down, B, T, V, labels).sum) / 2e-6 / 4.0;
    CHECK(grad[i] == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("warmup schedule reaches the peak at the warmup boundary") {
  const std::size_t total = 260;
  const auto warmup = static_cast<std::size_t>(std::ceil(0.1 * total));
  const LinearSchedule s(2e-5, warmup, total);
  CHECK(s.at(0) == 0.0);
  CHECK(s.at(warmup) == doctest::Approx(2e-5).epsilon(1e-12));
  for (std::size_t i = 1; i <= warmup; ++i) CHECK(s.at(i) > s.at(i - 1));
  for (std::size_t i = warmup + 1; i <= total; ++i) CHECK(s.at(i) < s.at(i - 1));
  CHECK(s.at(total) == 0.0);
}

TEST_CASE("AdamW first step moves each weight by lr against the gradient sign") {
  AdamW opt(3, AdamWConfig{0.9, 0.999, 1e-12, 0.5}, {1, 0, 0});
  std::vector<double> p = {1.0, 1.0, 1.0};
  const std::vector<double> g = {0.3, -2.0, 0.0};
  opt.step(p, g, 0.1);
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 1.0 - 0.1));
  CHECK(p[1] == doctest::Approx(1.1));
  CHECK(p[2] == doctest::Approx(1.0));
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("gradient clipping") {
  std::vector<double> g = {3.0, 4.0};
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  std::vector<double> small = {0.1, 0.1};
  clip_grad_norm(small, 1.0);
  CHECK(small[0] == 0.1);
}

TEST_CASE("decay mask excludes biases and norms") {
  GptModel m(toy::tiny_shape(1, 16, 2), 1);
  const auto mask = decay_mask(m);
  for (const auto& t : m.layout()) CHECK(mask[t.offset] == (t.decay ? 1 : 0));
  CHECK(m.tensor("ln1b").decay == false);
  CHECK(m.tensor("qkvw").decay == true);
}

TEST_CASE("validate is deterministic and drops after training") {
  Fixture f;
  const double before = validate(f.ckpt.model, f.train, 4);
  CHECK(validate(f.ckpt.model, f.train, 4) == before);
  CHECK(validate(f.ckpt.model, f.train, 3) == doctest::Approx(before).epsilon(1e-12));
  const auto result = train_sft(f.ckpt, f.train, f.train, quick_config(4));
  const double after = validate(f.ckpt.model, f.train, 4);
  CHECK(after < before);
  CHECK(after == doctest::Approx(result.best_val_loss).epsilon(1e-12));
  CHECK_THROWS_AS(validate(f.ckpt.model, std::vector<EncodedExample>{}, 4), InvalidArgument);
}

TEST_CASE("training is reproducible for a fixed seed") {
  Fixture a, b;
  const auto ra = train_sft(a.ckpt, a.train, a.train, quick_config(3));
  const auto rb = train_sft(b.ckpt, b.train, b.train, quick_config(3));
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    CHECK(ra.history[i].val_loss == rb.history[i].val_loss);
    CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
  }
  CHECK(a.ckpt.model == b.ckpt.model);
}

TEST_CASE("the saved checkpoint holds the best validation weights") {
  Fixture f;
  const auto rows_val = toy::synthetic_corpus(7, 99);
  const auto val = toy::encode_rows(f.ckpt.tokenizer, rows_val, true);
  const auto dir = std::filesystem::temp_directory_path() / "empathrl_sft_best";
  std::filesystem::remove_all(dir);
  const auto result = train_sft(f.ckpt, f.train, val, quick_config(5), dir);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& h : result.history) best = std::min(best, h.val_loss);
  CHECK(result.best_val_loss == best);

  const auto loaded = load_checkpoint(dir);
  CHECK(validate(loaded.model, val, 4) == doctest::Approx(best).epsilon(1e-12));
  CHECK(loaded.training_manifest.at("stage") == "sft");
  CHECK(loaded.training_manifest.at("variant") == "with_emotion");

  // Greedy decoding is unchanged by a save/load cycle.
  GenerationConfig greedy;
  greedy.greedy = true;
  greedy.max_new_tokens = 12;
  const PromptContext ctx{"grief", "i feel so sad today", Emotion::sadness};
  CHECK(generate(loaded, ctx, greedy).text == generate(f.ckpt, ctx, greedy).text);

  std::size_t lines = 0;
  std::ifstream metrics(dir / kMetricsFile);
  for (std::string line; std::getline(metrics, line);) ++lines;
  CHECK(lines == result.history.size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("patience cannot stop training before the observation epoch") {
  Fixture f;
  auto cfg = quick_config(6);
  cfg.learning_rate = 1e-12;
  cfg.patience = 1;
  cfg.early_stop_epoch = 4;
  const auto result = train_sft(f.ckpt, f.train, f.train, cfg);
  CHECK(result.history.size() >= 4);
}

TEST_CASE("a non-finite loss aborts training") {
  Fixture f;
  for (auto& p : f.ckpt.model.params()) p = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_sft(f.ckpt, f.train, f.train, quick_config(1)), DivergenceError);
}

}  // TEST_SUITE
