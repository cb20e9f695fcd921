#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "empathrl/error.hpp"
#include "empathrl/gpt_model.hpp"
#include "empathrl/random.hpp"

using namespace empathrl;

namespace {

GptConfig micro() {
  GptConfig c;
  c.vocab_size = 23;
  c.context_window = 8;
  c.n_layer = 2;
  c.n_head = 2;
  c.d_model = 8;
  c.init_std = 0.3;
  return c;
}

TokenBatch random_batch(Rng& rng, std::size_t B, std::size_t T, std::size_t V) {
  TokenBatch b{B, T, std::vector<TokenId>(B * T), std::vector<std::uint8_t>(B * T, 1)};
  for (auto& t : b.tokens) t = static_cast<TokenId>(rng.below(V));
  return b;
}

/// Scalar objective: <logits, wl> + <lnf, wh>.
double objective(const GptModel& m, const TokenBatch& batch, const std::vector<double>& wl,
                 const std::vector<double>& wh) {
  Activations acts;
  m.forward(batch, acts);
  double s = 0.0;
  for (std::size_t i = 0; i < wl.size(); ++i) s += acts.logits[i] * wl[i];
  for (std::size_t i = 0; i < wh.size(); ++i) s += acts.lnf[i] * wh[i];
  return s;
}

void check_gradients(bool with_hidden) {
  const auto cfg = micro();
  GptModel model(cfg, 7);
  Rng rng(31);
  const std::size_t B = 2, T = 5;
  auto batch = random_batch(rng, B, T, cfg.vocab_size);
  batch.mask[B * T - 1] = 0;
  std::vector<double> wl(B * T * cfg.vocab_size), wh;
  for (auto& w : wl) w = rng.normal();
  if (with_hidden) {
    wh.resize(B * T * cfg.d_model);
    for (auto& w : wh) w = rng.normal();
  }

  Activations acts;
  model.forward(batch, acts);
  std::vector<double> grads(model.num_parameters(), 0.0);
  model.backward(batch, acts, wl, wh, grads);

  const double h = 1e-5;
  double worst = 0.0;
  for (const auto& tensor : model.layout()) {
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = tensor.offset + static_cast<std::size_t>(rng.below(tensor.size));
      const double saved = model.params()[i];
      model.params()[i] = saved + h;
      const double up = objective(model, batch, wl, wh);
      model.params()[i] = saved - h;
      const double down = objective(model, batch, wl, wh);
      model.params()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - grads[i]) / std::max(1.0, std::abs(numeric));
      CAPTURE(tensor.name);
      CHECK(err < 1e-6);
      worst = std::max(worst, err);
    }
  }
  MESSAGE("worst relative gradient error " << worst);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("backward matches finite differences through the logits") { check_gradients(false); }

TEST_CASE("backward matches finite differences through the hidden state") { check_gradients(true); }

TEST_CASE("next-token distributions are normalized") {
  const auto cfg = micro();
  GptModel model(cfg, 3);
  Rng rng(32);
  const auto batch = random_batch(rng, 3, 8, cfg.vocab_size);
  Activations acts;
  model.forward(batch, acts);
  for (std::size_t row = 0; row < 3 * 8; ++row) {
    const double* z = acts.logits.data() + row * cfg.vocab_size;
    double mx = z[0];
    for (std::size_t v = 1; v < cfg.vocab_size; ++v) mx = std::max(mx, z[v]);
    double sum = 0.0;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) sum += std::exp(z[v] - mx);
    double total = 0.0;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) total += std::exp(z[v] - mx) / sum;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("incremental decoding matches the full forward pass") {
  const auto cfg = micro();
  GptModel model(cfg, 4);
  Rng rng(33);
  const auto batch = random_batch(rng, 1, 8, cfg.vocab_size);
  Activations acts;
  model.forward(batch, acts);
  auto cache = model.make_cache();
  for (std::size_t t = 0; t < 8; ++t) {
    const auto next = model.forward_next(cache, batch.tokens[t]);
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      CHECK(next[v] == doctest::Approx(acts.logits[t * cfg.vocab_size + v]).epsilon(1e-10));
    }
  }
}

TEST_CASE("right padding does not change earlier positions") {
  const auto cfg = micro();
  GptModel model(cfg, 5);
  Rng rng(34);
  const auto full = random_batch(rng, 1, 8, cfg.vocab_size);
  TokenBatch short_batch{1, 5, {full.tokens.begin(), full.tokens.begin() + 5}, std::vector<std::uint8_t>(5, 1)};
  auto padded = full;
  for (std::size_t t = 5; t < 8; ++t) padded.mask[t] = 0;
  Activations a, b;
  model.forward(short_batch, a);
  model.forward(padded, b);
  for (std::size_t i = 0; i < 5 * cfg.vocab_size; ++i) CHECK(a.logits[i] == doctest::Approx(b.logits[i]).epsilon(1e-12));
}

TEST_CASE("resize_vocab keeps old rows and mean-initializes new ones") {
  auto cfg = micro();
  GptModel model(cfg, 6);
  const auto before = std::vector<double>(model.params().begin(), model.params().end());
  const auto& wte = model.tensor("wte");
  const std::vector<double> old_wte(before.begin() + static_cast<std::ptrdiff_t>(wte.offset),
                                    before.begin() + static_cast<std::ptrdiff_t>(wte.offset + wte.size));
  model.resize_vocab(cfg.vocab_size + 15, 9, 0.0);
  CHECK(model.config().vocab_size == cfg.vocab_size + 15);
  const auto& wte2 = model.tensor("wte");
  const std::size_t C = cfg.d_model;
  for (std::size_t i = 0; i < old_wte.size(); ++i) CHECK(model.params()[wte2.offset + i] == old_wte[i]);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) mean += old_wte[v * C + c];
    mean /= static_cast<double>(cfg.vocab_size);
    CHECK(model.params()[wte2.offset + (cfg.vocab_size + 3) * C + c] == doctest::Approx(mean).epsilon(1e-12));
  }
  CHECK_THROWS_AS(model.resize_vocab(5, 1), InvalidArgument);
}

TEST_CASE("weights round-trip through save and load") {
  GptModel model(micro(), 8);
  const auto path = std::filesystem::temp_directory_path() / "empathrl_model_test.bin";
  model.save(path);
  CHECK(GptModel::load(path) == model);
  std::filesystem::remove(path);
}

TEST_CASE("same seed, same initialization") {
  CHECK(GptModel(micro(), 1) == GptModel(micro(), 1));
  CHECK_FALSE(GptModel(micro(), 1) == GptModel(micro(), 2));
}

TEST_CASE("GPT-2 small shape") {
  const auto cfg = GptConfig::gpt2_small();
  CHECK(cfg.vocab_size == 50257);
  CHECK(cfg.context_window == 1024);
  CHECK(cfg.n_layer == 12);
  CHECK(cfg.d_model == 768);
  auto bad = micro();
  bad.n_head = 3;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

}  // TEST_SUITE
