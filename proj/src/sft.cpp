#include "empathrl/sft.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "empathrl/error.hpp"
#include "empathrl/optim.hpp"
#include "empathrl/random.hpp"

namespace empathrl {

using nlohmann::json;

std::string_view to_string(SftVariant v) noexcept {
  return v == SftVariant::with_emotion ? "with_emotion" : "no_emotion";
}

SftVariant parse_sft_variant(std::string_view s) {
  if (s == "with_emotion" || s == "with-emotion") return SftVariant::with_emotion;
  if (s == "no_emotion" || s == "no-emotion") return SftVariant::no_emotion;
  throw InvalidArgument("unknown SFT variant '" + std::string(s) +
                        "' (expected with-emotion or no-emotion)");
}

void SftConfig::validate() const {
  if (optimizer != "adamw") throw InvalidArgument("sft.optimizer must be adamw");
  if (loss != "cross_entropy") throw InvalidArgument("sft.loss must be cross_entropy");
  if (!(learning_rate > 0.0)) throw InvalidArgument("sft.learning_rate must be positive");
  if (batch_size == 0) throw InvalidArgument("sft.batch_size must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) {
    throw InvalidArgument("sft.warmup_ratio must be in [0, 1]");
  }
  if (max_epochs == 0) throw InvalidArgument("sft.max_epochs must be positive");
  if (validate_every_epochs == 0) throw InvalidArgument("sft.validate_every_epochs must be positive");
  if (patience == 0) throw InvalidArgument("sft.patience must be positive");
  if (weight_decay < 0.0) throw InvalidArgument("sft.weight_decay must be non-negative");
  if (grad_clip < 0.0) throw InvalidArgument("sft.grad_clip must be non-negative");
  if (max_len < 2) throw InvalidArgument("sft.max_len must be at least 2");
}

void to_json(json& j, const SftConfig& c) {
  j = json{{"optimizer", c.optimizer},
           {"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"warmup_ratio", c.warmup_ratio},
           {"max_epochs", c.max_epochs},
           {"loss", c.loss},
           {"early_stop_epoch", c.early_stop_epoch},
           {"validate_every_epochs", c.validate_every_epochs},
           {"patience", c.patience},
           {"weight_decay", c.weight_decay},
           {"grad_clip", c.grad_clip},
           {"shuffle", c.shuffle},
           {"max_len", c.max_len},
           {"seed", c.seed},
           {"variant", to_string(c.variant)}};
}

void from_json(const json& j, SftConfig& c) {
  SftConfig d;
  c.optimizer = j.value("optimizer", d.optimizer);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.loss = j.value("loss", d.loss);
  c.early_stop_epoch = j.value("early_stop_epoch", d.early_stop_epoch);
  c.validate_every_epochs = j.value("validate_every_epochs", d.validate_every_epochs);
  c.patience = j.value("patience", d.patience);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.max_len = j.value("max_len", d.max_len);
  c.seed = j.value("seed", d.seed);
  c.variant = parse_sft_variant(j.value("variant", std::string(to_string(d.variant))));
}

MaskedNll masked_nll(std::span<const double> logits, std::size_t batch, std::size_t seq_len,
                     std::size_t vocab, std::span<const TokenId> labels, std::span<double> dlogits,
                     std::size_t grad_denominator) {
  if (logits.size() != batch * seq_len * vocab) throw InvalidArgument("logits shape mismatch");
  if (labels.size() != batch * seq_len) throw InvalidArgument("labels shape mismatch");
  const bool want_grad = !dlogits.empty();
  if (want_grad && dlogits.size() != logits.size()) throw InvalidArgument("dlogits shape mismatch");

  MaskedNll out;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 1; t < seq_len; ++t) {
      const TokenId label = labels[b * seq_len + t];
      if (label == kIgnoreIndex) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= vocab) {
        throw InvalidArgument("label id out of range");
      }
      const double* row = logits.data() + (b * seq_len + t - 1) * vocab;
      const double maxv = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - maxv);
      const double logz = maxv + std::log(z);
      out.sum += logz - row[label];
      ++out.count;
    }
  }
  if (!want_grad || out.count == 0) return out;

  const double denom = static_cast<double>(grad_denominator == 0 ? out.count : grad_denominator);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 1; t < seq_len; ++t) {
      const TokenId label = labels[b * seq_len + t];
      if (label == kIgnoreIndex) continue;
      const double* row = logits.data() + (b * seq_len + t - 1) * vocab;
      double* drow = dlogits.data() + (b * seq_len + t - 1) * vocab;
      const double maxv = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - maxv);
      for (std::size_t v = 0; v < vocab; ++v) drow[v] += std::exp(row[v] - maxv) / z / denom;
      drow[label] -= 1.0 / denom;
    }
  }
  return out;
}

double masked_cross_entropy(std::span<const double> logits, std::size_t batch, std::size_t seq_len,
                            std::size_t vocab, std::span<const TokenId> labels) {
  const auto nll = masked_nll(logits, batch, seq_len, vocab, labels);
  if (nll.count == 0) throw InvalidArgument("batch has no labeled positions");
  return nll.sum / static_cast<double>(nll.count);
}

SftBatch make_sft_batch(std::span<const EncodedExample> rows, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InvalidArgument("empty batch");
  std::size_t longest = 0;
  for (auto i : indices) longest = std::max(longest, rows[i].length());
  longest = std::max<std::size_t>(longest, 1);

  SftBatch out;
  out.tokens.batch = indices.size();
  out.tokens.seq_len = longest;
  out.tokens.tokens.reserve(indices.size() * longest);
  out.tokens.mask.reserve(indices.size() * longest);
  out.labels.reserve(indices.size() * longest);
  for (auto i : indices) {
    const auto& r = rows[i];
    if (r.token_ids.size() < longest) throw InvalidArgument("encoded row shorter than its length");
    out.tokens.tokens.insert(out.tokens.tokens.end(), r.token_ids.begin(),
                             r.token_ids.begin() + static_cast<std::ptrdiff_t>(longest));
    out.tokens.mask.insert(out.tokens.mask.end(), r.attention_mask.begin(),
                           r.attention_mask.begin() + static_cast<std::ptrdiff_t>(longest));
    out.labels.insert(out.labels.end(), r.labels.begin(),
                      r.labels.begin() + static_cast<std::ptrdiff_t>(longest));
  }
  return out;
}

namespace {

MaskedNll split_nll(const GptModel& model, std::span<const EncodedExample> rows,
                    std::size_t batch_size) {
  MaskedNll total;
  Activations acts;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(rows.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = make_sft_batch(rows, idx);
    model.forward(batch.tokens, acts);
    const auto nll = masked_nll(acts.logits, batch.tokens.batch, batch.tokens.seq_len,
                                model.config().vocab_size, batch.labels);
    total.sum += nll.sum;
    total.count += nll.count;
  }
  return total;
}

}  // namespace

double validate(const GptModel& model, std::span<const EncodedExample> rows, std::size_t batch_size) {
  if (rows.empty()) throw InvalidArgument("validation split is empty");
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
  const auto nll = split_nll(model, rows, batch_size);
  if (nll.count == 0) throw InvalidArgument("validation split has no labeled positions");
  return nll.sum / static_cast<double>(nll.count);
}

SftResult train_sft(Checkpoint& ckpt, std::span<const EncodedExample> train,
                    std::span<const EncodedExample> val, const SftConfig& config,
                    const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (train.empty()) throw InvalidArgument("training split is empty");
  if (val.empty()) throw InvalidArgument("validation split is empty");
  GptModel& model = ckpt.model;
  if (model.config().vocab_size != ckpt.tokenizer.total_vocab_size()) {
    throw InvalidArgument("embedding matrix has not been resized to the extended vocabulary");
  }

  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.max_epochs;
  const auto warmup_steps =
      static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));
  const LinearSchedule schedule(config.learning_rate, warmup_steps, total_steps);
  AdamW optimizer(model.num_parameters(), AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay},
                  decay_mask(model));

  SftResult result;
  result.initial_train_loss = validate(model, train, config.batch_size);
  spdlog::info(json{{"event", "sft_start"},
                    {"examples", train.size()},
                    {"val_examples", val.size()},
                    {"total_steps", total_steps},
                    {"warmup_steps", warmup_steps},
                    {"initial_train_loss", result.initial_train_loss}}
                   .dump());

  std::vector<double> grads(model.num_parameters());
  std::vector<double> dlogits;
  std::vector<double> best_params(model.params().begin(), model.params().end());
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Activations acts;
  std::size_t step = 0;
  std::size_t since_best = 0;
  json val_history = json::array();

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::filesystem::remove(*out_dir / kMetricsFile);
  }

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    if (config.shuffle) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed(config.seed, epoch));
      rng.shuffle(order);
    }
    MaskedNll epoch_nll;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(config.batch_size, order.size() - start));
      const auto batch = make_sft_batch(train, idx);
      model.forward(batch.tokens, acts);
      dlogits.assign(acts.logits.size(), 0.0);
      const auto nll = masked_nll(acts.logits, batch.tokens.batch, batch.tokens.seq_len,
                                  model.config().vocab_size, batch.labels, dlogits);
      if (nll.count == 0) continue;
      const double loss = nll.sum / static_cast<double>(nll.count);
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
      }
      std::fill(grads.begin(), grads.end(), 0.0);
      model.backward(batch.tokens, acts, dlogits, {}, grads);
      clip_grad_norm(grads, config.grad_clip);
      optimizer.step(model.params(), grads, schedule.at(step));
      ++step;
      epoch_nll.sum += nll.sum;
      epoch_nll.count += nll.count;
    }

    SftEpochLog log;
    log.epoch = epoch;
    log.steps = step;
    log.lr_end = schedule.at(step);
    log.train_loss = epoch_nll.count ? epoch_nll.sum / static_cast<double>(epoch_nll.count) : 0.0;
    const bool validate_now = epoch % config.validate_every_epochs == 0 || epoch == config.max_epochs;
    log.val_loss = validate_now ? validate(model, val, config.batch_size)
                                : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back(log);

    const json row{{"epoch", epoch},         {"step", step},
                   {"train_loss", log.train_loss}, {"val_loss", validate_now ? json(log.val_loss) : json()},
                   {"lr", log.lr_end}};
    json event = row;
    event["event"] = "sft_epoch";
    spdlog::info(event.dump());
    if (out_dir) append_jsonl(*out_dir / kMetricsFile, row);
    if (!validate_now) continue;
    val_history.push_back(log.val_loss);

    if (log.val_loss < result.best_val_loss) {
      result.best_val_loss = log.val_loss;
      result.best_epoch = epoch;
      since_best = 0;
      std::copy(model.params().begin(), model.params().end(), best_params.begin());
      if (out_dir) {
        Checkpoint snapshot{model, ckpt.tokenizer, ckpt.training_manifest};
        snapshot.training_manifest["sft_config"] = config;
        snapshot.training_manifest["seed"] = config.seed;
        snapshot.training_manifest["variant"] = to_string(config.variant);
        snapshot.training_manifest["stage"] = "sft";
        snapshot.training_manifest["epoch"] = epoch;
        snapshot.training_manifest["val_loss_history"] = val_history;
        snapshot.training_manifest["best_val_loss"] = log.val_loss;
        snapshot.training_manifest["code_revision"] = code_revision();
        save_checkpoint(*out_dir, snapshot);
      }
    } else {
      ++since_best;
      if (since_best >= config.patience && epoch >= config.early_stop_epoch) {
        result.stopped_early = epoch < config.max_epochs;
        break;
      }
    }
  }

  std::copy(best_params.begin(), best_params.end(), model.params().begin());
  result.final_train_loss = validate(model, train, config.batch_size);

  ckpt.training_manifest["sft_config"] = config;
  ckpt.training_manifest["seed"] = config.seed;
  ckpt.training_manifest["variant"] = to_string(config.variant);
  ckpt.training_manifest["stage"] = "sft";
  ckpt.training_manifest["epoch"] = result.best_epoch;
  ckpt.training_manifest["val_loss_history"] = val_history;
  ckpt.training_manifest["best_val_loss"] = result.best_val_loss;
  ckpt.training_manifest["initial_train_loss"] = result.initial_train_loss;
  ckpt.training_manifest["final_train_loss"] = result.final_train_loss;
  ckpt.training_manifest["stopped_early"] = result.stopped_early;
  ckpt.training_manifest["code_revision"] = code_revision();
  if (out_dir) save_checkpoint(*out_dir, ckpt);

  spdlog::info(json{{"event", "sft_done"},
                    {"best_epoch", result.best_epoch},
                    {"best_val_loss", result.best_val_loss},
                    {"final_train_loss", result.final_train_loss}}
                   .dump());
  return result;
}

}  // namespace empathrl
