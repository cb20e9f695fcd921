#include "empathrl/gpt_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "empathrl/error.hpp"
#include "empathrl/random.hpp"

namespace empathrl {

using nlohmann::json;

GptConfig GptConfig::gpt2_small() {
  return GptConfig{50257, 1024, 12, 12, 768, 0.02};
}

void GptConfig::validate() const {
  if (vocab_size == 0 || context_window == 0 || n_layer == 0 || n_head == 0 || d_model == 0) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (d_model % n_head != 0) throw InvalidArgument("d_model must be divisible by n_head");
  if (!(init_std > 0.0)) throw InvalidArgument("init_std must be positive");
}

void to_json(json& j, const GptConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"context_window", c.context_window},
           {"n_layer", c.n_layer},       {"n_head", c.n_head},
           {"d_model", c.d_model},       {"init_std", c.init_std}};
}

void from_json(const json& j, GptConfig& c) {
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.context_window = j.at("context_window").get<std::size_t>();
  c.n_layer = j.at("n_layer").get<std::size_t>();
  c.n_head = j.at("n_head").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.init_std = j.value("init_std", 0.02);
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kMagic[8] = {'E', 'M', 'P', 'R', 'L', 'G', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Kernels. All buffers are row-major; BT = batch * seq_len rows.

void encoder_forward(double* out, const TokenBatch& batch, const double* wte, const double* wpe,
                     std::size_t C) {
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq_len; ++t) {
      double* o = out + (b * batch.seq_len + t) * C;
      const double* tok = wte + static_cast<std::size_t>(batch.at(b, t)) * C;
      const double* pos = wpe + t * C;
      for (std::size_t i = 0; i < C; ++i) o[i] = tok[i] + pos[i];
    }
  }
}

void encoder_backward(double* dwte, double* dwpe, const double* dout, const TokenBatch& batch,
                      std::size_t C) {
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < batch.seq_len; ++t) {
      const double* d = dout + (b * batch.seq_len + t) * C;
      double* dtok = dwte + static_cast<std::size_t>(batch.at(b, t)) * C;
      double* dpos = dwpe + t * C;
      for (std::size_t i = 0; i < C; ++i) {
        dtok[i] += d[i];
        dpos[i] += d[i];
      }
    }
  }
}

void layernorm_row(double* out, double* mean_out, double* rstd_out, const double* x,
                   const double* w, const double* bias, std::size_t C) {
  double m = 0.0;
  for (std::size_t i = 0; i < C; ++i) m += x[i];
  m /= static_cast<double>(C);
  double v = 0.0;
  for (std::size_t i = 0; i < C; ++i) {
    const double d = x[i] - m;
    v += d * d;
  }
  v /= static_cast<double>(C);
  const double s = 1.0 / std::sqrt(v + kLayerNormEps);
  for (std::size_t i = 0; i < C; ++i) out[i] = (x[i] - m) * s * w[i] + bias[i];
  if (mean_out != nullptr) *mean_out = m;
  if (rstd_out != nullptr) *rstd_out = s;
}

void layernorm_forward(double* out, double* mean, double* rstd, const double* inp,
                       const double* w, const double* bias, std::size_t BT, std::size_t C) {
  for (std::size_t r = 0; r < BT; ++r) {
    layernorm_row(out + r * C, mean + r, rstd + r, inp + r * C, w, bias, C);
  }
}

void layernorm_backward(double* dinp, double* dw, double* db, const double* dout, const double* inp,
                        const double* w, const double* mean, const double* rstd, std::size_t BT,
                        std::size_t C) {
  for (std::size_t r = 0; r < BT; ++r) {
    const double* d = dout + r * C;
    const double* x = inp + r * C;
    double* dx = dinp + r * C;
    const double m = mean[r];
    const double s = rstd[r];
    double dnorm_mean = 0.0;
    double dnorm_norm_mean = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      const double norm = (x[i] - m) * s;
      const double dnorm = w[i] * d[i];
      dnorm_mean += dnorm;
      dnorm_norm_mean += dnorm * norm;
    }
    dnorm_mean /= static_cast<double>(C);
    dnorm_norm_mean /= static_cast<double>(C);
    for (std::size_t i = 0; i < C; ++i) {
      const double norm = (x[i] - m) * s;
      const double dnorm = w[i] * d[i];
      db[i] += d[i];
      dw[i] += norm * d[i];
      dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
    }
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// out[r, o] = bias[o] + sum_i inp[r, i] * weight[o, i]
void matmul_forward(double* out, const double* inp, const double* weight, const double* bias,
                    std::size_t BT, std::size_t C, std::size_t OC) {
  for (std::size_t r = 0; r < BT; ++r) {
    const double* x = inp + r * C;
    double* y = out + r * OC;
    for (std::size_t o = 0; o < OC; ++o) {
      y[o] = (bias != nullptr ? bias[o] : 0.0) + dot(x, weight + o * C, C);
    }
  }
}

void matmul_backward(double* dinp, double* dweight, double* dbias, const double* dout,
                     const double* inp, const double* weight, std::size_t BT, std::size_t C,
                     std::size_t OC) {
  for (std::size_t r = 0; r < BT; ++r) {
    const double* d = dout + r * OC;
    double* dx = dinp + r * C;
    for (std::size_t o = 0; o < OC; ++o) {
      const double g = d[o];
      if (g == 0.0) continue;
      const double* wrow = weight + o * C;
      for (std::size_t i = 0; i < C; ++i) dx[i] += g * wrow[i];
    }
  }
  for (std::size_t o = 0; o < OC; ++o) {
    double* dw = dweight + o * C;
    double bsum = 0.0;
    for (std::size_t r = 0; r < BT; ++r) {
      const double g = dout[r * OC + o];
      if (g == 0.0) continue;
      bsum += g;
      const double* x = inp + r * C;
      for (std::size_t i = 0; i < C; ++i) dw[i] += g * x[i];
    }
    if (dbias != nullptr) dbias[o] += bsum;
  }
}

const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

void gelu_forward(double* out, const double* inp, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = inp[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + 0.044715 * x * x * x)));
  }
}

void gelu_backward(double* dinp, const double* inp, const double* dout, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = inp[i];
    const double cube = 0.044715 * x * x * x;
    const double arg = kGeluScale * (x + cube);
    const double th = std::tanh(arg);
    const double sech2 = 1.0 - th * th;
    const double local = 0.5 * (1.0 + th) + x * 0.5 * sech2 * kGeluScale * (1.0 + 3.0 * 0.044715 * x * x);
    dinp[i] += local * dout[i];
  }
}

/// One query row of causal attention for a single head. Writes the
/// pre-softmax scores and attention weights (length t+1) and the head output.
void attend_row(const double* query, const double* keys, const double* values, std::size_t stride,
                std::size_t t, std::size_t hs, const std::uint8_t* key_mask, double* preatt,
                double* att, double* out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  double maxval = -std::numeric_limits<double>::infinity();
  for (std::size_t t2 = 0; t2 <= t; ++t2) {
    if (key_mask != nullptr && key_mask[t2] == 0) {
      preatt[t2] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const double v = dot(query, keys + t2 * stride, hs) * scale;
    preatt[t2] = v;
    maxval = std::max(maxval, v);
  }
  double expsum = 0.0;
  for (std::size_t t2 = 0; t2 <= t; ++t2) {
    const double e = std::isinf(preatt[t2]) ? 0.0 : std::exp(preatt[t2] - maxval);
    att[t2] = e;
    expsum += e;
  }
  const double inv = expsum > 0.0 ? 1.0 / expsum : 0.0;
  for (std::size_t t2 = 0; t2 <= t; ++t2) att[t2] *= inv;
  std::fill(out, out + hs, 0.0);
  for (std::size_t t2 = 0; t2 <= t; ++t2) {
    const double a = att[t2];
    if (a == 0.0) continue;
    const double* v = values + t2 * stride;
    for (std::size_t i = 0; i < hs; ++i) out[i] += a * v[i];
  }
}

void attention_forward(double* out, double* preatt, double* att, const double* qkv,
                       const TokenBatch& batch, std::size_t C, std::size_t NH) {
  const std::size_t T = batch.seq_len;
  const std::size_t C3 = 3 * C;
  const std::size_t hs = C / NH;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::uint8_t* mask = batch.mask.data() + b * T;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const double* base = qkv + b * T * C3;
        double* pre = preatt + ((b * NH + h) * T + t) * T;
        double* a = att + ((b * NH + h) * T + t) * T;
        attend_row(base + t * C3 + h * hs, base + C + h * hs, base + 2 * C + h * hs, C3, t, hs,
                   mask, pre, a, out + (b * T + t) * C + h * hs);
        std::fill(pre + t + 1, pre + T, 0.0);
        std::fill(a + t + 1, a + T, 0.0);
      }
    }
  }
}

void attention_backward(double* dqkv, const double* dout, const double* qkv, const double* att,
                        const TokenBatch& batch, std::size_t C, std::size_t NH) {
  const std::size_t T = batch.seq_len;
  const std::size_t C3 = 3 * C;
  const std::size_t hs = C / NH;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hs));
  std::vector<double> datt(T);
  std::vector<double> dpre(T);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < NH; ++h) {
        const double* a = att + ((b * NH + h) * T + t) * T;
        const double* dout_h = dout + (b * T + t) * C + h * hs;
        const double* query = qkv + b * T * C3 + t * C3 + h * hs;
        double* dquery = dqkv + b * T * C3 + t * C3 + h * hs;

        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const double* value = qkv + b * T * C3 + t2 * C3 + 2 * C + h * hs;
          double* dvalue = dqkv + b * T * C3 + t2 * C3 + 2 * C + h * hs;
          datt[t2] = dot(value, dout_h, hs);
          const double at = a[t2];
          if (at != 0.0) {
            for (std::size_t i = 0; i < hs; ++i) dvalue[i] += at * dout_h[i];
          }
        }
        double weighted = 0.0;
        for (std::size_t t2 = 0; t2 <= t; ++t2) weighted += a[t2] * datt[t2];
        for (std::size_t t2 = 0; t2 <= t; ++t2) dpre[t2] = a[t2] * (datt[t2] - weighted);

        for (std::size_t t2 = 0; t2 <= t; ++t2) {
          const double g = dpre[t2] * scale;
          if (g == 0.0) continue;
          const double* key = qkv + b * T * C3 + t2 * C3 + C + h * hs;
          double* dkey = dqkv + b * T * C3 + t2 * C3 + C + h * hs;
          for (std::size_t i = 0; i < hs; ++i) {
            dquery[i] += key[i] * g;
            dkey[i] += query[i] * g;
          }
        }
      }
    }
  }
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated model file");
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

GptModel::GptModel(const GptConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build_layout();
  params_.assign(off_.total, 0.0);

  Rng rng(seed);
  const double residual_std = config_.init_std / std::sqrt(2.0 * static_cast<double>(config_.n_layer));
  for (const auto& t : layout_) {
    double* p = params_.data() + t.offset;
    if (t.name == "ln1w" || t.name == "ln2w" || t.name == "lnfw") {
      std::fill(p, p + t.size, 1.0);
    } else if (!t.decay) {
      std::fill(p, p + t.size, 0.0);
    } else {
      const bool residual = t.name == "attprojw" || t.name == "fcprojw";
      const double sigma = residual ? residual_std : config_.init_std;
      for (std::size_t i = 0; i < t.size; ++i) p[i] = rng.normal(0.0, sigma);
    }
  }
}

void GptModel::build_layout() {
  const std::size_t V = config_.vocab_size;
  const std::size_t T = config_.context_window;
  const std::size_t L = config_.n_layer;
  const std::size_t C = config_.d_model;
  layout_.clear();
  std::size_t offset = 0;
  auto add = [&](const char* name, std::size_t size, bool decay) {
    layout_.push_back(ParamTensor{name, offset, size, decay});
    offset += size;
    return layout_.back().offset;
  };
  off_.wte = add("wte", V * C, true);
  off_.wpe = add("wpe", T * C, true);
  off_.ln1w = add("ln1w", L * C, false);
  off_.ln1b = add("ln1b", L * C, false);
  off_.qkvw = add("qkvw", L * 3 * C * C, true);
  off_.qkvb = add("qkvb", L * 3 * C, false);
  off_.attprojw = add("attprojw", L * C * C, true);
  off_.attprojb = add("attprojb", L * C, false);
  off_.ln2w = add("ln2w", L * C, false);
  off_.ln2b = add("ln2b", L * C, false);
  off_.fcw = add("fcw", L * 4 * C * C, true);
  off_.fcb = add("fcb", L * 4 * C, false);
  off_.fcprojw = add("fcprojw", L * C * 4 * C, true);
  off_.fcprojb = add("fcprojb", L * C, false);
  off_.lnfw = add("lnfw", C, false);
  off_.lnfb = add("lnfb", C, false);
  off_.total = offset;
}

const ParamTensor& GptModel::tensor(std::string_view name) const {
  for (const auto& t : layout_) {
    if (t.name == name) return t;
  }
  throw InvalidArgument("no parameter tensor named " + std::string(name));
}

void GptModel::resize_vocab(std::size_t new_vocab_size, std::uint64_t seed, double noise_std) {
  const std::size_t old_v = config_.vocab_size;
  if (new_vocab_size < old_v) throw InvalidArgument("resize_vocab cannot shrink the vocabulary");
  if (new_vocab_size == old_v) return;
  const std::size_t C = config_.d_model;

  std::vector<double> mean(C, 0.0);
  for (std::size_t v = 0; v < old_v; ++v) {
    for (std::size_t i = 0; i < C; ++i) mean[i] += params_[off_.wte + v * C + i];
  }
  for (auto& m : mean) m /= static_cast<double>(old_v);

  std::vector<double> next;
  next.reserve(off_.total + (new_vocab_size - old_v) * C);
  next.insert(next.end(), params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(old_v * C));
  Rng rng(seed);
  for (std::size_t v = old_v; v < new_vocab_size; ++v) {
    for (std::size_t i = 0; i < C; ++i) next.push_back(mean[i] + rng.normal(0.0, noise_std));
  }
  next.insert(next.end(), params_.begin() + static_cast<std::ptrdiff_t>(old_v * C), params_.end());

  config_.vocab_size = new_vocab_size;
  build_layout();
  params_ = std::move(next);
}

void GptModel::forward(const TokenBatch& batch, Activations& acts) const {
  const std::size_t B = batch.batch;
  const std::size_t T = batch.seq_len;
  const std::size_t C = config_.d_model;
  const std::size_t L = config_.n_layer;
  const std::size_t NH = config_.n_head;
  const std::size_t V = config_.vocab_size;
  const std::size_t BT = B * T;
  if (T > config_.context_window) throw ContextTooLong("sequence exceeds the model context window");
  if (batch.tokens.size() != BT || batch.mask.size() != BT) {
    throw InvalidArgument("token batch shape mismatch");
  }
  for (auto tok : batch.tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw InvalidArgument("token id out of range");
  }

  acts.batch = B;
  acts.seq_len = T;
  acts.encoded.assign(BT * C, 0.0);
  acts.ln1.assign(L * BT * C, 0.0);
  acts.ln1_mean.assign(L * BT, 0.0);
  acts.ln1_rstd.assign(L * BT, 0.0);
  acts.qkv.assign(L * BT * 3 * C, 0.0);
  acts.atty.assign(L * BT * C, 0.0);
  acts.preatt.assign(L * B * NH * T * T, 0.0);
  acts.att.assign(L * B * NH * T * T, 0.0);
  acts.attproj.assign(L * BT * C, 0.0);
  acts.residual2.assign(L * BT * C, 0.0);
  acts.ln2.assign(L * BT * C, 0.0);
  acts.ln2_mean.assign(L * BT, 0.0);
  acts.ln2_rstd.assign(L * BT, 0.0);
  acts.fch.assign(L * BT * 4 * C, 0.0);
  acts.fch_gelu.assign(L * BT * 4 * C, 0.0);
  acts.fcproj.assign(L * BT * C, 0.0);
  acts.residual3.assign(L * BT * C, 0.0);
  acts.lnf.assign(BT * C, 0.0);
  acts.lnf_mean.assign(BT, 0.0);
  acts.lnf_rstd.assign(BT, 0.0);
  acts.logits.assign(BT * V, 0.0);

  const double* p = params_.data();
  encoder_forward(acts.encoded.data(), batch, p + off_.wte, p + off_.wpe, C);
  for (std::size_t l = 0; l < L; ++l) {
    const double* residual = l == 0 ? acts.encoded.data() : acts.residual3.data() + (l - 1) * BT * C;
    double* ln1 = acts.ln1.data() + l * BT * C;
    double* qkv = acts.qkv.data() + l * BT * 3 * C;
    double* atty = acts.atty.data() + l * BT * C;
    double* preatt = acts.preatt.data() + l * B * NH * T * T;
    double* att = acts.att.data() + l * B * NH * T * T;
    double* attproj = acts.attproj.data() + l * BT * C;
    double* residual2 = acts.residual2.data() + l * BT * C;
    double* ln2 = acts.ln2.data() + l * BT * C;
    double* fch = acts.fch.data() + l * BT * 4 * C;
    double* fch_gelu = acts.fch_gelu.data() + l * BT * 4 * C;
    double* fcproj = acts.fcproj.data() + l * BT * C;
    double* residual3 = acts.residual3.data() + l * BT * C;

    layernorm_forward(ln1, acts.ln1_mean.data() + l * BT, acts.ln1_rstd.data() + l * BT, residual,
                      p + off_.ln1w + l * C, p + off_.ln1b + l * C, BT, C);
    matmul_forward(qkv, ln1, p + off_.qkvw + l * 3 * C * C, p + off_.qkvb + l * 3 * C, BT, C, 3 * C);
    attention_forward(atty, preatt, att, qkv, batch, C, NH);
    matmul_forward(attproj, atty, p + off_.attprojw + l * C * C, p + off_.attprojb + l * C, BT, C, C);
    for (std::size_t i = 0; i < BT * C; ++i) residual2[i] = residual[i] + attproj[i];
    layernorm_forward(ln2, acts.ln2_mean.data() + l * BT, acts.ln2_rstd.data() + l * BT, residual2,
                      p + off_.ln2w + l * C, p + off_.ln2b + l * C, BT, C);
    matmul_forward(fch, ln2, p + off_.fcw + l * 4 * C * C, p + off_.fcb + l * 4 * C, BT, C, 4 * C);
    gelu_forward(fch_gelu, fch, BT * 4 * C);
    matmul_forward(fcproj, fch_gelu, p + off_.fcprojw + l * 4 * C * C, p + off_.fcprojb + l * C, BT,
                   4 * C, C);
    for (std::size_t i = 0; i < BT * C; ++i) residual3[i] = residual2[i] + fcproj[i];
  }
  const double* last = acts.residual3.data() + (L - 1) * BT * C;
  layernorm_forward(acts.lnf.data(), acts.lnf_mean.data(), acts.lnf_rstd.data(), last,
                    p + off_.lnfw, p + off_.lnfb, BT, C);
  matmul_forward(acts.logits.data(), acts.lnf.data(), p + off_.wte, nullptr, BT, C, V);
}

void GptModel::backward(const TokenBatch& batch, const Activations& acts,
                        std::span<const double> dlogits, std::span<const double> dhidden,
                        std::span<double> grads) const {
  const std::size_t B = batch.batch;
  const std::size_t T = batch.seq_len;
  const std::size_t C = config_.d_model;
  const std::size_t L = config_.n_layer;
  const std::size_t NH = config_.n_head;
  const std::size_t V = config_.vocab_size;
  const std::size_t BT = B * T;
  if (acts.batch != B || acts.seq_len != T) throw InvalidArgument("activations do not match batch");
  if (dlogits.size() != BT * V) throw InvalidArgument("dlogits shape mismatch");
  if (!dhidden.empty() && dhidden.size() != BT * C) throw InvalidArgument("dhidden shape mismatch");
  if (grads.size() != params_.size()) throw InvalidArgument("gradient buffer size mismatch");

  const double* p = params_.data();
  double* g = grads.data();

  std::vector<double> dlnf(BT * C, 0.0);
  if (!dhidden.empty()) std::copy(dhidden.begin(), dhidden.end(), dlnf.begin());
  matmul_backward(dlnf.data(), g + off_.wte, nullptr, dlogits.data(), acts.lnf.data(), p + off_.wte,
                  BT, C, V);

  std::vector<double> dres(BT * C, 0.0);
  const double* last = acts.residual3.data() + (L - 1) * BT * C;
  layernorm_backward(dres.data(), g + off_.lnfw, g + off_.lnfb, dlnf.data(), last, p + off_.lnfw,
                     acts.lnf_mean.data(), acts.lnf_rstd.data(), BT, C);

  std::vector<double> dfch_gelu(BT * 4 * C);
  std::vector<double> dfch(BT * 4 * C);
  std::vector<double> dln2(BT * C);
  std::vector<double> datty(BT * C);
  std::vector<double> dqkv(BT * 3 * C);
  std::vector<double> dln1(BT * C);

  for (std::size_t li = L; li-- > 0;) {
    const std::size_t l = li;
    const double* residual = l == 0 ? acts.encoded.data() : acts.residual3.data() + (l - 1) * BT * C;
    const double* ln1 = acts.ln1.data() + l * BT * C;
    const double* qkv = acts.qkv.data() + l * BT * 3 * C;
    const double* atty = acts.atty.data() + l * BT * C;
    const double* att = acts.att.data() + l * B * NH * T * T;
    const double* residual2 = acts.residual2.data() + l * BT * C;
    const double* ln2 = acts.ln2.data() + l * BT * C;
    const double* fch = acts.fch.data() + l * BT * 4 * C;
    const double* fch_gelu = acts.fch_gelu.data() + l * BT * 4 * C;

    std::fill(dfch_gelu.begin(), dfch_gelu.end(), 0.0);
    std::fill(dfch.begin(), dfch.end(), 0.0);
    std::fill(dln2.begin(), dln2.end(), 0.0);
    std::fill(datty.begin(), datty.end(), 0.0);
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    std::fill(dln1.begin(), dln1.end(), 0.0);

    // dres holds d(residual3); the MLP branch and the skip both read it.
    matmul_backward(dfch_gelu.data(), g + off_.fcprojw + l * 4 * C * C, g + off_.fcprojb + l * C,
                    dres.data(), fch_gelu, p + off_.fcprojw + l * 4 * C * C, BT, 4 * C, C);
    gelu_backward(dfch.data(), fch, dfch_gelu.data(), BT * 4 * C);
    matmul_backward(dln2.data(), g + off_.fcw + l * 4 * C * C, g + off_.fcb + l * 4 * C, dfch.data(),
                    ln2, p + off_.fcw + l * 4 * C * C, BT, C, 4 * C);
    layernorm_backward(dres.data(), g + off_.ln2w + l * C, g + off_.ln2b + l * C, dln2.data(),
                       residual2, p + off_.ln2w + l * C, acts.ln2_mean.data() + l * BT,
                       acts.ln2_rstd.data() + l * BT, BT, C);

    // dres now holds d(residual2).
    matmul_backward(datty.data(), g + off_.attprojw + l * C * C, g + off_.attprojb + l * C,
                    dres.data(), atty, p + off_.attprojw + l * C * C, BT, C, C);
    attention_backward(dqkv.data(), datty.data(), qkv, att, batch, C, NH);
    matmul_backward(dln1.data(), g + off_.qkvw + l * 3 * C * C, g + off_.qkvb + l * 3 * C,
                    dqkv.data(), ln1, p + off_.qkvw + l * 3 * C * C, BT, C, 3 * C);
    layernorm_backward(dres.data(), g + off_.ln1w + l * C, g + off_.ln1b + l * C, dln1.data(),
                       residual, p + off_.ln1w + l * C, acts.ln1_mean.data() + l * BT,
                       acts.ln1_rstd.data() + l * BT, BT, C);
  }
  encoder_backward(g + off_.wte, g + off_.wpe, dres.data(), batch, C);
}

KvCache GptModel::make_cache() const {
  KvCache cache;
  cache.keys.assign(config_.n_layer, std::vector<double>(config_.context_window * config_.d_model));
  cache.values.assign(config_.n_layer, std::vector<double>(config_.context_window * config_.d_model));
  return cache;
}

std::vector<double> GptModel::forward_next(KvCache& cache, TokenId token) const {
  const std::size_t C = config_.d_model;
  const std::size_t NH = config_.n_head;
  const std::size_t hs = C / NH;
  const std::size_t V = config_.vocab_size;
  const std::size_t pos = cache.length;
  if (pos >= config_.context_window) throw ContextTooLong("KV cache is full");
  if (token < 0 || static_cast<std::size_t>(token) >= V) throw InvalidArgument("token id out of range");
  if (cache.keys.size() != config_.n_layer) throw InvalidArgument("cache was made for another model");

  const double* p = params_.data();
  std::vector<double> x(C);
  for (std::size_t i = 0; i < C; ++i) {
    x[i] = p[off_.wte + static_cast<std::size_t>(token) * C + i] + p[off_.wpe + pos * C + i];
  }
  std::vector<double> ln(C), qkv(3 * C), atty(C), proj(C), fch(4 * C), fch_gelu(4 * C);
  std::vector<double> pre(pos + 1), att(pos + 1);

  for (std::size_t l = 0; l < config_.n_layer; ++l) {
    layernorm_row(ln.data(), nullptr, nullptr, x.data(), p + off_.ln1w + l * C, p + off_.ln1b + l * C, C);
    matmul_forward(qkv.data(), ln.data(), p + off_.qkvw + l * 3 * C * C, p + off_.qkvb + l * 3 * C, 1,
                   C, 3 * C);
    std::copy(qkv.begin() + static_cast<std::ptrdiff_t>(C), qkv.begin() + static_cast<std::ptrdiff_t>(2 * C),
              cache.keys[l].begin() + static_cast<std::ptrdiff_t>(pos * C));
    std::copy(qkv.begin() + static_cast<std::ptrdiff_t>(2 * C), qkv.end(),
              cache.values[l].begin() + static_cast<std::ptrdiff_t>(pos * C));
    for (std::size_t h = 0; h < NH; ++h) {
      attend_row(qkv.data() + h * hs, cache.keys[l].data() + h * hs, cache.values[l].data() + h * hs,
                 C, pos, hs, nullptr, pre.data(), att.data(), atty.data() + h * hs);
    }
    matmul_forward(proj.data(), atty.data(), p + off_.attprojw + l * C * C, p + off_.attprojb + l * C,
                   1, C, C);
    for (std::size_t i = 0; i < C; ++i) x[i] += proj[i];
    layernorm_row(ln.data(), nullptr, nullptr, x.data(), p + off_.ln2w + l * C, p + off_.ln2b + l * C, C);
    matmul_forward(fch.data(), ln.data(), p + off_.fcw + l * 4 * C * C, p + off_.fcb + l * 4 * C, 1, C,
                   4 * C);
    gelu_forward(fch_gelu.data(), fch.data(), 4 * C);
    matmul_forward(proj.data(), fch_gelu.data(), p + off_.fcprojw + l * 4 * C * C,
                   p + off_.fcprojb + l * C, 1, 4 * C, C);
    for (std::size_t i = 0; i < C; ++i) x[i] += proj[i];
  }
  layernorm_row(ln.data(), nullptr, nullptr, x.data(), p + off_.lnfw, p + off_.lnfb, C);
  std::vector<double> logits(V);
  matmul_forward(logits.data(), ln.data(), p + off_.wte, nullptr, 1, C, V);
  ++cache.length;
  return logits;
}

void GptModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kFormatVersion);
  const std::string cfg = json(config_).dump();
  write_pod(out, static_cast<std::uint64_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_pod(out, static_cast<std::uint64_t>(params_.size()));
  out.write(reinterpret_cast<const char*>(params_.data()),
            static_cast<std::streamsize>(params_.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

GptModel GptModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[sizeof(kMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(path.string() + " is not a model weights file");
  }
  if (read_pod<std::uint32_t>(in) != kFormatVersion) throw ParseError("unsupported weights version");
  const auto cfg_len = read_pod<std::uint64_t>(in);
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  GptModel model;
  model.config_ = json::parse(cfg).get<GptConfig>();
  model.config_.validate();
  model.build_layout();
  const auto n = read_pod<std::uint64_t>(in);
  if (n != model.off_.total) throw ParseError("parameter count does not match the stored config");
  model.params_.resize(n);
  in.read(reinterpret_cast<char*>(model.params_.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("truncated weights in " + path.string());
  return model;
}

GptModel GptModel::load_llmc(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<std::int32_t, 256> header{};
  in.read(reinterpret_cast<char*>(header.data()), sizeof(header));
  if (!in || header[0] != 20240326) throw ParseError(path.string() + " is not an llm.c checkpoint");
  if (header[1] != 3) throw ParseError("only float32 llm.c checkpoints (version 3) are supported");

  GptConfig cfg;
  cfg.context_window = static_cast<std::size_t>(header[2]);
  cfg.vocab_size = static_cast<std::size_t>(header[3]);
  cfg.n_layer = static_cast<std::size_t>(header[4]);
  cfg.n_head = static_cast<std::size_t>(header[5]);
  cfg.d_model = static_cast<std::size_t>(header[6]);
  const auto padded_vocab = static_cast<std::size_t>(header[7]);
  cfg.validate();

  GptModel model;
  model.config_ = cfg;
  model.build_layout();
  model.params_.assign(model.off_.total, 0.0);

  const std::size_t C = cfg.d_model;
  std::vector<float> buf;
  auto read_floats = [&](std::size_t n) {
    buf.resize(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IoError("truncated llm.c checkpoint");
  };
  // The stored embedding table is padded to padded_vocab rows.
  read_floats(padded_vocab * C);
  std::copy(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(cfg.vocab_size * C),
            model.params_.begin() + static_cast<std::ptrdiff_t>(model.off_.wte));
  for (std::size_t k = 1; k < model.layout_.size(); ++k) {
    const auto& t = model.layout_[k];
    read_floats(t.size);
    std::copy(buf.begin(), buf.end(), model.params_.begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
  return model;
}

}  // namespace empathrl
