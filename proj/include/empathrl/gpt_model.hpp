#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "empathrl/bpe_tokenizer.hpp"

namespace empathrl {

/// Decoder-only transformer shape (GPT-2 family: learned positions, pre-norm
/// blocks, tanh-GELU MLP, tied input/output embeddings).
struct GptConfig {
  std::size_t vocab_size = 50257;
  std::size_t context_window = 1024;
  std::size_t n_layer = 12;
  std::size_t n_head = 12;
  std::size_t d_model = 768;
  double init_std = 0.02;

  /// 124M-parameter GPT-2 small.
  static GptConfig gpt2_small();

  void validate() const;
  bool operator==(const GptConfig&) const = default;
};

void to_json(nlohmann::json& j, const GptConfig& c);
void from_json(const nlohmann::json& j, GptConfig& c);

struct ParamTensor {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  /// Weight decay applies (matrices and embeddings, not biases or norms).
  bool decay = false;
};

/// Row-major B x T token block with a {0,1} attention mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;

  TokenId at(std::size_t b, std::size_t t) const { return tokens[b * seq_len + t]; }
};

/// Intermediate values of one forward pass, kept for backward.
struct Activations {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<double> encoded;
  std::vector<double> ln1, ln1_mean, ln1_rstd;
  std::vector<double> qkv, atty, preatt, att, attproj, residual2;
  std::vector<double> ln2, ln2_mean, ln2_rstd;
  std::vector<double> fch, fch_gelu, fcproj, residual3;
  /// Final layer-normed hidden states, B x T x C.
  std::vector<double> lnf, lnf_mean, lnf_rstd;
  /// B x T x V.
  std::vector<double> logits;
};

/// Per-layer key/value cache for incremental decoding of one sequence.
struct KvCache {
  std::size_t length = 0;
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
};

class GptModel {
 public:
  /// GPT-2 initialization: N(0, init_std) weights, residual projections scaled
  /// by 1/sqrt(2 n_layer), zero biases, unit norm gains.
  GptModel(const GptConfig& config, std::uint64_t seed);

  const GptConfig& config() const noexcept { return config_; }
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t num_parameters() const noexcept { return params_.size(); }
  const std::vector<ParamTensor>& layout() const noexcept { return layout_; }
  const ParamTensor& tensor(std::string_view name) const;

  /// Grows the embedding table; new rows are the mean of the existing rows
  /// plus N(0, noise_std) noise.
  void resize_vocab(std::size_t new_vocab_size, std::uint64_t seed, double noise_std = 0.02);

  void forward(const TokenBatch& batch, Activations& acts) const;

  /// Accumulates parameter gradients into `grads`. `dlogits` is B x T x V;
  /// `dhidden` (optional, B x T x C) is added at the final normed hidden state.
  void backward(const TokenBatch& batch, const Activations& acts, std::span<const double> dlogits,
                std::span<const double> dhidden, std::span<double> grads) const;

  KvCache make_cache() const;
  /// Feeds one token at position cache.length and returns its next-token logits.
  std::vector<double> forward_next(KvCache& cache, TokenId token) const;

  void save(const std::filesystem::path& path) const;
  static GptModel load(const std::filesystem::path& path);
  /// Imports an llm.c float32 GPT-2 checkpoint (gpt2_124M.bin layout).
  static GptModel load_llmc(const std::filesystem::path& path);

  bool operator==(const GptModel& other) const {
    return config_ == other.config_ && params_ == other.params_;
  }

 private:
  struct Offsets {
    std::size_t wte, wpe, ln1w, ln1b, qkvw, qkvb, attprojw, attprojb, ln2w, ln2b, fcw, fcb,
        fcprojw, fcprojb, lnfw, lnfb, total;
  };

  GptModel() = default;
  void build_layout();

  GptConfig config_;
  std::vector<double> params_;
  std::vector<ParamTensor> layout_;
  Offsets off_{};
};

}  // namespace empathrl
