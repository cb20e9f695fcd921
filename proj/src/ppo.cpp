#include "empathrl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "empathrl/error.hpp"
#include "empathrl/inference.hpp"
#include "empathrl/optim.hpp"
#include "empathrl/random.hpp"

namespace empathrl {

using nlohmann::json;

void PpoConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("rl.learning_rate must be positive");
  if (epochs == 0 || batch_size == 0) throw InvalidArgument("rl.epochs and rl.batch_size must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("rl.top_p must be in (0, 1]");
  if (!(temperature > 0.0)) throw InvalidArgument("rl.temperature must be positive");
  if (max_new_tokens == 0) throw InvalidArgument("rl.max_new_tokens must be positive");
  if (!(clip_epsilon > 0.0)) throw InvalidArgument("rl.clip_epsilon must be positive");
  if (kl_coefficient < 0.0) throw InvalidArgument("rl.kl_coefficient must be non-negative");
  if (!(gamma >= 0.0 && gamma <= 1.0) || !(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("rl.gamma and rl.lambda must be in [0, 1]");
  }
  if (ppo_epochs == 0 || mini_batch_size == 0) {
    throw InvalidArgument("rl.ppo_epochs and rl.mini_batch_size must be positive");
  }
  if (vf_coef < 0.0 || cliprange_value <= 0.0) throw InvalidArgument("invalid value-loss settings");
  if (!(kl_ceiling > 0.0)) throw InvalidArgument("rl.kl_ceiling must be positive");
}

void to_json(json& j, const PpoConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"shuffle", c.shuffle},
           {"top_p", c.top_p},
           {"top_k", c.top_k},
           {"temperature", c.temperature},
           {"max_new_tokens", c.max_new_tokens},
           {"clip_epsilon", c.clip_epsilon},
           {"kl_coefficient", c.kl_coefficient},
           {"adaptive_kl", c.adaptive_kl},
           {"kl_target", c.kl_target},
           {"kl_horizon", c.kl_horizon},
           {"gamma", c.gamma},
           {"lambda", c.lambda},
           {"whiten_advantages", c.whiten_advantages},
           {"ppo_epochs", c.ppo_epochs},
           {"mini_batch_size", c.mini_batch_size},
           {"vf_coef", c.vf_coef},
           {"cliprange_value", c.cliprange_value},
           {"max_grad_norm", c.max_grad_norm},
           {"max_log_ratio", c.max_log_ratio},
           {"kl_ceiling", c.kl_ceiling},
           {"value_head_init_std", c.value_head_init_std},
           {"seed", c.seed}};
}

void from_json(const json& j, PpoConfig& c) {
  PpoConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.top_p = j.value("top_p", d.top_p);
  c.top_k = j.value("top_k", d.top_k);
  c.temperature = j.value("temperature", d.temperature);
  c.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  c.clip_epsilon = j.value("clip_epsilon", d.clip_epsilon);
  c.kl_coefficient = j.value("kl_coefficient", d.kl_coefficient);
  c.adaptive_kl = j.value("adaptive_kl", d.adaptive_kl);
  c.kl_target = j.value("kl_target", d.kl_target);
  c.kl_horizon = j.value("kl_horizon", d.kl_horizon);
  c.gamma = j.value("gamma", d.gamma);
  c.lambda = j.value("lambda", d.lambda);
  c.whiten_advantages = j.value("whiten_advantages", d.whiten_advantages);
  c.ppo_epochs = j.value("ppo_epochs", d.ppo_epochs);
  c.mini_batch_size = j.value("mini_batch_size", d.mini_batch_size);
  c.vf_coef = j.value("vf_coef", d.vf_coef);
  c.cliprange_value = j.value("cliprange_value", d.cliprange_value);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.max_log_ratio = j.value("max_log_ratio", d.max_log_ratio);
  c.kl_ceiling = j.value("kl_ceiling", d.kl_ceiling);
  c.value_head_init_std = j.value("value_head_init_std", d.value_head_init_std);
  c.seed = j.value("seed", d.seed);
}

double clipped_surrogate(double ratio, double advantage, double epsilon) {
  if (!std::isfinite(ratio) || !std::isfinite(advantage) || !std::isfinite(epsilon)) {
    throw InvalidArgument("clipped_surrogate: non-finite input");
  }
  if (!(ratio > 0.0)) throw InvalidArgument("clipped_surrogate: ratio must be positive");
  if (!(epsilon > 0.0)) throw InvalidArgument("clipped_surrogate: epsilon must be positive");
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

double probability_ratio(double logprob_new, double logprob_old, double max_log_ratio) {
  if (!std::isfinite(logprob_new) || !std::isfinite(logprob_old)) {
    throw InvalidArgument("probability_ratio: non-finite log-probability");
  }
  return std::exp(std::clamp(logprob_new - logprob_old, -max_log_ratio, max_log_ratio));
}

std::vector<double> kl_penalty(std::span<const double> logprobs_policy,
                               std::span<const double> logprobs_ref, double beta) {
  if (logprobs_policy.size() != logprobs_ref.size()) {
    throw InvalidArgument("kl_penalty: sequences differ in length");
  }
  std::vector<double> out(logprobs_policy.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = beta * (logprobs_policy[t] - logprobs_ref[t]);
  return out;
}

std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values,
                                   double gamma, double lambda) {
  if (rewards.size() != values.size()) throw InvalidArgument("gae: rewards and values differ in length");
  std::vector<double> adv(rewards.size());
  double last = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    const double next_value = t + 1 < values.size() ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    last = delta + gamma * lambda * last;
    adv[t] = last;
  }
  return adv;
}

bool whiten(std::vector<std::vector<double>>& rows) {
  std::size_t n = 0;
  double sum = 0.0;
  for (const auto& r : rows) {
    n += r.size();
    for (double x : r) sum += x;
  }
  if (n < 2) return false;
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto& r : rows) {
    for (double x : r) var += (x - mean) * (x - mean);
  }
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + 1e-8);
  for (auto& r : rows) {
    for (double& x : r) x = (x - mean) * inv;
  }
  return true;
}

std::vector<std::vector<double>> estimate_advantages(const std::vector<std::vector<double>>& rewards,
                                                     const std::vector<std::vector<double>>& values,
                                                     double gamma, double lambda, bool whiten_batch) {
  if (rewards.size() != values.size()) throw InvalidArgument("estimate_advantages: batch size mismatch");
  std::vector<std::vector<double>> adv;
  adv.reserve(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv.push_back(gae_advantages(rewards[i], values[i], gamma, lambda));
  }
  if (whiten_batch && !whiten(adv)) {
    spdlog::warn("estimate_advantages: fewer than 2 advantages, whitening skipped");
  }
  return adv;
}

// ---------------------------------------------------------------------------

ValueHead::ValueHead(std::size_t d_model, double init_std, std::uint64_t seed) : weight(d_model) {
  Rng rng(seed);
  for (double& w : weight) w = rng.normal(0.0, init_std);
}

double ValueHead::operator()(const double* hidden) const {
  double v = bias;
  for (std::size_t i = 0; i < weight.size(); ++i) v += weight[i] * hidden[i];
  return v;
}

json ValueHead::to_json() const { return json{{"weight", weight}, {"bias", bias}}; }

ValueHead ValueHead::from_json(const json& j) {
  ValueHead h;
  h.weight = j.at("weight").get<std::vector<double>>();
  h.bias = j.at("bias").get<double>();
  return h;
}

RlPrompt rl_prompt_of(const DialogueExample& ex) {
  return RlPrompt{context_of(ex), ex.therapist_emotion};
}

namespace {

TokenBatch pack(const std::vector<std::vector<TokenId>>& sequences, std::span<const std::size_t> rows,
                TokenId pad) {
  TokenBatch b;
  b.batch = rows.size();
  for (auto r : rows) b.seq_len = std::max(b.seq_len, sequences[r].size());
  b.tokens.assign(b.batch * b.seq_len, pad);
  b.mask.assign(b.batch * b.seq_len, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = sequences[rows[i]];
    std::copy(s.begin(), s.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len), s.size(), 1);
  }
  return b;
}

/// log softmax(row)[token] and, optionally, the softmax itself.
double token_logprob(const double* row, std::size_t vocab, TokenId token, std::vector<double>* probs) {
  const double maxv = *std::max_element(row, row + vocab);
  double z = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - maxv);
  if (probs != nullptr) {
    probs->resize(vocab);
    for (std::size_t v = 0; v < vocab; ++v) (*probs)[v] = std::exp(row[v] - maxv) / z;
  }
  return row[token] - maxv - std::log(z);
}

}  // namespace

SequenceScores score_sequences(const GptModel& model, const ValueHead* head,
                               const std::vector<std::vector<TokenId>>& sequences,
                               std::span<const std::size_t> prompt_lengths, TokenId pad) {
  if (sequences.size() != prompt_lengths.size()) throw InvalidArgument("score_sequences: size mismatch");
  const std::size_t V = model.config().vocab_size;
  const std::size_t C = model.config().d_model;
  SequenceScores out;
  out.logprobs.resize(sequences.size());
  if (head != nullptr) out.values.resize(sequences.size());
  Activations acts;
  constexpr std::size_t kChunk = 4;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(sequences.size(), start + kChunk); ++i) rows.push_back(i);
    const auto batch = pack(sequences, rows, pad);
    model.forward(batch, acts);
    for (std::size_t bi = 0; bi < rows.size(); ++bi) {
      const auto r = rows[bi];
      const auto& seq = sequences[r];
      const std::size_t p0 = prompt_lengths[r];
      if (p0 == 0 || p0 >= seq.size()) throw InvalidArgument("score_sequences: empty prompt or response");
      for (std::size_t p = p0; p < seq.size(); ++p) {
        const std::size_t q = bi * batch.seq_len + p - 1;
        out.logprobs[r].push_back(token_logprob(acts.logits.data() + q * V, V, seq[p], nullptr));
        if (head != nullptr) out.values[r].push_back((*head)(acts.lnf.data() + q * C));
      }
    }
  }
  return out;
}

LossTerms ppo_loss_and_grad(const GptModel& policy, const ValueHead& head, const Rollout& rollout,
                            std::span<const std::size_t> rows, const PpoConfig& config, TokenId pad,
                            std::span<double> model_grads, std::span<double> head_grads) {
  const std::size_t V = policy.config().vocab_size;
  const std::size_t C = policy.config().d_model;
  const bool want_grad = !model_grads.empty();
  if (want_grad && head_grads.size() != C + 1) throw InvalidArgument("value head gradient size mismatch");

  const auto batch = pack(rollout.sequences, rows, pad);
  Activations acts;
  policy.forward(batch, acts);

  std::size_t n_tokens = 0;
  for (auto r : rows) n_tokens += rollout.response_length(r);
  if (n_tokens == 0) throw InvalidArgument("ppo_loss: no response tokens");
  const double inv_n = 1.0 / static_cast<double>(n_tokens);

  std::vector<double> dlogits;
  std::vector<double> dhidden;
  if (want_grad) {
    dlogits.assign(acts.logits.size(), 0.0);
    dhidden.assign(acts.lnf.size(), 0.0);
  }
  LossTerms terms;
  std::size_t clipped = 0;
  std::vector<double> probs;
  const double eps = config.clip_epsilon;
  for (std::size_t bi = 0; bi < rows.size(); ++bi) {
    const auto r = rows[bi];
    const auto& seq = rollout.sequences[r];
    const std::size_t p0 = rollout.prompt_lengths[r];
    for (std::size_t p = p0; p < seq.size(); ++p) {
      const std::size_t t = p - p0;
      const std::size_t q = bi * batch.seq_len + p - 1;
      const double* row = acts.logits.data() + q * V;
      const double lp = token_logprob(row, V, seq[p], want_grad ? &probs : nullptr);
      const double old_lp = rollout.logprobs[r][t];
      const double adv = rollout.advantages[r][t];
      const double ratio = probability_ratio(lp, old_lp, config.max_log_ratio);
      const double surrogate = clipped_surrogate(ratio, adv, eps);
      terms.policy_loss -= surrogate * inv_n;
      terms.approx_kl += 0.5 * (lp - old_lp) * (lp - old_lp) * inv_n;
      const bool unclipped_branch = ratio * adv <= std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
      if (!unclipped_branch) ++clipped;

      const double* hidden = acts.lnf.data() + q * C;
      const double v = head(hidden);
      const double old_v = rollout.values[r][t];
      const double ret = rollout.returns[r][t];
      const double v_clip = std::clamp(v, old_v - config.cliprange_value, old_v + config.cliprange_value);
      const double l1 = (v - ret) * (v - ret);
      const double l2 = (v_clip - ret) * (v_clip - ret);
      terms.value_loss += 0.5 * std::max(l1, l2) * inv_n;

      if (!want_grad) continue;
      // d(policy_loss)/d(lp): only the unclipped branch depends on lp.
      const double dlp = unclipped_branch ? -ratio * adv * inv_n : 0.0;
      if (dlp != 0.0) {
        double* drow = dlogits.data() + q * V;
        for (std::size_t k = 0; k < V; ++k) drow[k] -= dlp * probs[k];
        drow[seq[p]] += dlp;
      }
      double dv = 0.0;
      if (l1 >= l2) {
        dv = (v - ret);
      } else if (v > old_v - config.cliprange_value && v < old_v + config.cliprange_value) {
        dv = (v_clip - ret);
      }
      dv *= config.vf_coef * inv_n;
      if (dv != 0.0) {
        double* dh = dhidden.data() + q * C;
        for (std::size_t k = 0; k < C; ++k) {
          dh[k] += dv * head.weight[k];
          head_grads[k] += dv * hidden[k];
        }
        head_grads[C] += dv;
      }
    }
  }
  terms.clip_fraction = static_cast<double>(clipped) * inv_n;
  terms.total = terms.policy_loss + config.vf_coef * terms.value_loss;
  if (want_grad) policy.backward(batch, acts, dlogits, dhidden, model_grads);
  return terms;
}

json to_json(const PpoBatchLog& log) {
  return json{{"epoch", log.epoch},
              {"batch", log.batch},
              {"mean_scaled_reward", log.mean_scaled_reward},
              {"std_scaled_reward", log.std_scaled_reward},
              {"mean_r_q", log.mean_components.quality},
              {"mean_r_e", log.mean_components.emotion},
              {"mean_r_r", log.mean_components.relevance},
              {"mean_r_emp", log.mean_components.empathy},
              {"mean_r_s", log.mean_components.sentiment},
              {"mean_kl", log.mean_kl},
              {"policy_loss", log.policy_loss},
              {"value_loss", log.value_loss},
              {"beta", log.beta},
              {"mean_response_tokens", log.mean_response_tokens}};
}

PpoTrainer::PpoTrainer(Checkpoint policy, const RewardEngine& engine, PpoConfig config)
    : policy_(std::move(policy)),
      reference_(policy_.model),
      engine_(engine),
      config_(config),
      beta_(config.kl_coefficient) {
  config_.validate();
  head_ = ValueHead(policy_.model.config().d_model, config_.value_head_init_std,
                    derive_seed(config_.seed, 0x5641));
  model_m_.assign(policy_.model.num_parameters(), 0.0);
  model_v_.assign(policy_.model.num_parameters(), 0.0);
  head_m_.assign(head_.weight.size() + 1, 0.0);
  head_v_.assign(head_.weight.size() + 1, 0.0);
}

Rollout PpoTrainer::rollout(std::span<const RlPrompt> prompts, std::uint64_t seed) const {
  const auto& tok = policy_.tokenizer;
  const std::size_t window = generation_window(policy_);
  GenerationConfig gen;
  gen.top_p = config_.top_p;
  gen.top_k = config_.top_k;
  gen.temperature = config_.temperature;
  gen.max_new_tokens = config_.max_new_tokens;

  Rollout out;
  std::vector<RewardInput> inputs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto seq = build_inference_prompt(tok, prompts[i].context, window);
    Rng rng(derive_seed(seed, i));
    const auto response = generate_tokens(policy_.model, seq, gen, tok.id(Marker::eos), rng, window);
    out.prompt_lengths.push_back(seq.size());
    seq.insert(seq.end(), response.begin(), response.end());
    out.sequences.push_back(std::move(seq));
    const auto parsed = parse_generation(tok, response);
    inputs.push_back(RewardInput{parsed.therapist_text, parsed.therapist_emotion,
                                 parsed.therapist_emotion.has_value(), prompts[i].target_emotion,
                                 prompts[i].context.user_text});
    out.responses.push_back(parsed);
  }
  out.rewards = engine_.score_batch(inputs);

  const TokenId pad = tok.id(Marker::pad);
  auto scored = score_sequences(policy_.model, &head_, out.sequences, out.prompt_lengths, pad);
  out.logprobs = std::move(scored.logprobs);
  out.values = std::move(scored.values);
  out.ref_logprobs = score_sequences(reference_, nullptr, out.sequences, out.prompt_lengths, pad).logprobs;

  for (std::size_t i = 0; i < out.size(); ++i) {
    // Per-token KL penalty, scaled composite reward on the final token.
    auto kl = kl_penalty(out.logprobs[i], out.ref_logprobs[i], beta_);
    std::vector<double> rewards(kl.size());
    for (std::size_t t = 0; t < kl.size(); ++t) rewards[t] = -kl[t];
    rewards.back() += out.rewards[i].scaled_total;
    out.token_rewards.push_back(std::move(rewards));
  }
  std::vector<std::vector<double>> raw_adv;
  for (std::size_t i = 0; i < out.size(); ++i) {
    raw_adv.push_back(gae_advantages(out.token_rewards[i], out.values[i], config_.gamma, config_.lambda));
    std::vector<double> ret(raw_adv.back().size());
    for (std::size_t t = 0; t < ret.size(); ++t) ret[t] = raw_adv.back()[t] + out.values[i][t];
    out.returns.push_back(std::move(ret));
  }
  if (config_.whiten_advantages && !whiten(raw_adv)) {
    spdlog::warn("ppo: fewer than 2 advantages in the batch, whitening skipped");
  }
  out.advantages = std::move(raw_adv);
  return out;
}

void PpoTrainer::adam_update(std::span<double> params, std::span<const double> grads,
                             std::vector<double>& m, std::vector<double>& v, double c1, double c2) const {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
    params[i] -= config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

PpoBatchLog PpoTrainer::step(std::span<const RlPrompt> batch, std::size_t epoch, std::size_t batch_index) {
  const auto seed = derive_seed(config_.seed, epoch, batch_index);
  const Rollout ro = rollout(batch, seed);
  const TokenId pad = policy_.tokenizer.id(Marker::pad);

  PpoBatchLog log;
  log.epoch = epoch;
  log.batch = batch_index;
  log.beta = beta_;
  const double n = static_cast<double>(ro.size());
  double sum_tokens = 0.0;
  for (std::size_t i = 0; i < ro.size(); ++i) {
    const auto& r = ro.rewards[i];
    log.mean_scaled_reward += r.scaled_total / n;
    log.mean_components.quality += r.r_q / n;
    log.mean_components.emotion += r.r_e / n;
    log.mean_components.relevance += r.r_r / n;
    log.mean_components.empathy += r.r_emp / n;
    log.mean_components.sentiment += r.r_s / n;
    double seq_kl = 0.0;
    for (std::size_t t = 0; t < ro.logprobs[i].size(); ++t) seq_kl += ro.logprobs[i][t] - ro.ref_logprobs[i][t];
    log.mean_kl += seq_kl / n;
    sum_tokens += static_cast<double>(ro.response_length(i));
  }
  log.mean_response_tokens = sum_tokens / n;
  for (const auto& r : ro.rewards) {
    log.std_scaled_reward += (r.scaled_total - log.mean_scaled_reward) * (r.scaled_total - log.mean_scaled_reward) / n;
  }
  log.std_scaled_reward = std::sqrt(log.std_scaled_reward);

  std::vector<double> grads(policy_.model.num_parameters());
  std::vector<double> head_grads(head_.weight.size() + 1);
  std::vector<double> head_params(head_.weight.size() + 1);
  std::vector<std::size_t> order(ro.size());
  std::size_t updates = 0;
  for (std::size_t pe = 0; pe < config_.ppo_epochs; ++pe) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x9E37, pe));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config_.mini_batch_size) {
      const std::span<const std::size_t> rows(order.data() + start,
                                              std::min(config_.mini_batch_size, order.size() - start));
      std::fill(grads.begin(), grads.end(), 0.0);
      std::fill(head_grads.begin(), head_grads.end(), 0.0);
      const auto terms = ppo_loss_and_grad(policy_.model, head_, ro, rows, config_, pad, grads, head_grads);
      if (!std::isfinite(terms.total)) {
        throw DivergenceError("PPO loss became non-finite at epoch " + std::to_string(epoch));
      }
      // Clip the joint gradient of policy and value head.
      double sq = 0.0;
      for (double g : grads) sq += g * g;
      for (double g : head_grads) sq += g * g;
      const double norm = std::sqrt(sq);
      if (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm) {
        const double s = config_.max_grad_norm / (norm + 1e-6);
        for (double& g : grads) g *= s;
        for (double& g : head_grads) g *= s;
      }
      ++adam_t_;
      const double c1 = 1.0 - std::pow(0.9, static_cast<double>(adam_t_));
      const double c2 = 1.0 - std::pow(0.999, static_cast<double>(adam_t_));
      adam_update(policy_.model.params(), grads, model_m_, model_v_, c1, c2);
      std::copy(head_.weight.begin(), head_.weight.end(), head_params.begin());
      head_params.back() = head_.bias;
      adam_update(head_params, head_grads, head_m_, head_v_, c1, c2);
      std::copy(head_params.begin(), head_params.end() - 1, head_.weight.begin());
      head_.bias = head_params.back();
      log.policy_loss += terms.policy_loss;
      log.value_loss += terms.value_loss;
      ++updates;
    }
  }
  if (updates > 0) {
    log.policy_loss /= static_cast<double>(updates);
    log.value_loss /= static_cast<double>(updates);
  }
  if (config_.adaptive_kl) {
    const double err = std::clamp(log.mean_kl / config_.kl_target - 1.0, -0.2, 0.2);
    beta_ *= 1.0 + err * n / config_.kl_horizon;
  }
  return log;
}

PpoResult PpoTrainer::train(std::span<const RlPrompt> dataset,
                            const std::optional<std::filesystem::path>& out_dir) {
  if (dataset.empty()) throw InvalidArgument("RL dataset is empty");
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::filesystem::remove(*out_dir / kMetricsFile);
  }
  PpoResult result;
  std::vector<std::size_t> order(dataset.size());
  std::vector<RlPrompt> batch;
  for (std::size_t epoch = 1; epoch <= config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (config_.shuffle) {
      Rng rng(derive_seed(config_.seed, 0x5348, epoch));
      rng.shuffle(order);
    }
    PpoEpochLog epoch_log;
    epoch_log.epoch = epoch;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config_.batch_size); ++i) {
        batch.push_back(dataset[order[i]]);
      }
      const auto log = step(batch, epoch, n_batches);
      ++n_batches;
      epoch_log.mean_scaled_reward += log.mean_scaled_reward;
      epoch_log.mean_kl += log.mean_kl;
      result.max_batch_kl = std::max(result.max_batch_kl, log.mean_kl);
      if (log.mean_kl >= config_.kl_ceiling) {
        result.kl_ceiling_breached = true;
        spdlog::warn("ppo: mean KL {:.4f} reached the ceiling {:.4f}", log.mean_kl, config_.kl_ceiling);
      }
      json row = to_json(log);
      spdlog::info(json{{"event", "ppo_batch"}, {"metrics", row}}.dump());
      if (out_dir) append_jsonl(*out_dir / kMetricsFile, row);
      result.batches.push_back(log);
    }
    epoch_log.mean_scaled_reward /= static_cast<double>(n_batches);
    epoch_log.mean_kl /= static_cast<double>(n_batches);
    result.epochs.push_back(epoch_log);
    if (out_dir) save(*out_dir);
  }
  json curve = json::array();
  for (const auto& e : result.epochs) {
    curve.push_back(json{{"epoch", e.epoch}, {"mean_scaled_reward", e.mean_scaled_reward}, {"mean_kl", e.mean_kl}});
  }
  policy_.training_manifest["rl_reward_curve"] = curve;
  if (out_dir) save(*out_dir);
  return result;
}

void PpoTrainer::save(const std::filesystem::path& dir) const {
  Checkpoint ckpt = policy_;
  ckpt.training_manifest["rl_config"] = config_;
  ckpt.training_manifest["reward_config"] = engine_.config();
  ckpt.training_manifest["reward_scorers"] = engine_.registry().describe();
  ckpt.training_manifest["seed"] = config_.seed;
  ckpt.training_manifest["stage"] = "rl";
  ckpt.training_manifest["code_revision"] = code_revision();
  save_checkpoint(dir, ckpt);
  write_json_file(dir / "value_head.json", head_.to_json());
}

}  // namespace empathrl
