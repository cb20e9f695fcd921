#include "empathrl/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

void GenerationConfig::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must be in (0, 1]");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be positive");
  }
  if (max_new_tokens == 0) throw InvalidArgument("max_new_tokens must be positive");
}

void to_json(json& j, const GenerationConfig& c) {
  j = json{{"top_p", c.top_p},
           {"top_k", c.top_k},
           {"temperature", c.temperature},
           {"max_new_tokens", c.max_new_tokens},
           {"greedy", c.greedy},
           {"seed", c.seed}};
}

void from_json(const json& j, GenerationConfig& c) {
  c.top_p = j.value("top_p", c.top_p);
  c.top_k = j.value("top_k", c.top_k);
  c.temperature = j.value("temperature", c.temperature);
  c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
  c.greedy = j.value("greedy", c.greedy);
  c.seed = j.value("seed", c.seed);
}

std::vector<double> sampling_distribution(std::span<const double> logits, const GenerationConfig& cfg) {
  const std::size_t V = logits.size();
  if (V == 0) throw InvalidArgument("empty logits");
  std::vector<double> scaled(V);
  for (std::size_t i = 0; i < V; ++i) scaled[i] = logits[i] / cfg.temperature;

  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scaled[a] > scaled[b]; });

  std::size_t keep = V;
  if (cfg.top_k > 0) keep = std::min(keep, cfg.top_k);

  const double maxv = scaled[order[0]];
  std::vector<double> probs(V, 0.0);
  double z = 0.0;
  for (std::size_t r = 0; r < keep; ++r) {
    probs[order[r]] = std::exp(scaled[order[r]] - maxv);
    z += probs[order[r]];
  }
  for (std::size_t r = 0; r < keep; ++r) probs[order[r]] /= z;

  if (cfg.top_p < 1.0) {
    double mass = 0.0;
    std::size_t nucleus = 0;
    while (nucleus < keep) {
      mass += probs[order[nucleus]];
      ++nucleus;
      if (mass >= cfg.top_p) break;
    }
    double kept_mass = 0.0;
    for (std::size_t r = 0; r < keep; ++r) {
      if (r >= nucleus) {
        probs[order[r]] = 0.0;
      } else {
        kept_mass += probs[order[r]];
      }
    }
    for (std::size_t r = 0; r < nucleus; ++r) probs[order[r]] /= kept_mass;
  }
  return probs;
}

TokenId sample_token(std::span<const double> logits, const GenerationConfig& cfg, Rng& rng) {
  if (cfg.greedy) {
    const auto it = std::max_element(logits.begin(), logits.end());
    return static_cast<TokenId>(it - logits.begin());
  }
  const auto probs = sampling_distribution(logits, cfg);
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_nonzero = i;
    acc += probs[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_nonzero);
}

std::vector<TokenId> generate_tokens(const GptModel& model, std::span<const TokenId> prompt,
                                     const GenerationConfig& cfg, TokenId stop, Rng& rng,
                                     std::size_t window) {
  cfg.validate();
  window = std::min(window, model.config().context_window);
  if (prompt.empty()) throw InvalidArgument("empty prompt");
  if (prompt.size() >= window) {
    throw ContextTooLong("prompt of " + std::to_string(prompt.size()) +
                         " tokens leaves no room in the " + std::to_string(window) + "-token window");
  }
  const std::size_t budget = std::min(cfg.max_new_tokens, window - prompt.size());
  auto cache = model.make_cache();
  std::vector<double> logits;
  for (auto tok : prompt) logits = model.forward_next(cache, tok);

  std::vector<TokenId> out;
  out.reserve(budget);
  while (out.size() < budget) {
    const TokenId next = sample_token(logits, cfg, rng);
    out.push_back(next);
    if (next == stop || out.size() == budget) break;
    logits = model.forward_next(cache, next);
  }
  return out;
}

void to_json(json& j, const Suggestion& s) {
  j = json{{"text", s.text},
           {"emotion", s.emotion ? json(to_string(*s.emotion)) : json()},
           {"reward_breakdown", s.reward_breakdown ? json(*s.reward_breakdown) : json()},
           {"gen_config_used", s.gen_config_used},
           {"latency_ms", s.latency_ms},
           {"terminated_by_eos", s.terminated_by_eos}};
}

std::size_t generation_window(const Checkpoint& ckpt) {
  std::size_t max_len = kDefaultMaxLen;
  const auto& m = ckpt.training_manifest;
  if (m.contains("sft_config") && m["sft_config"].contains("max_len")) {
    max_len = m["sft_config"]["max_len"].get<std::size_t>();
  }
  return std::min(max_len, ckpt.model.config().context_window);
}

Suggestion generate(const Checkpoint& ckpt, const PromptContext& ctx, const GenerationConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t window = generation_window(ckpt);
  const auto prompt = build_inference_prompt(ckpt.tokenizer, ctx, window);
  Rng rng(cfg.seed);
  const auto tokens =
      generate_tokens(ckpt.model, prompt, cfg, ckpt.tokenizer.id(Marker::eos), rng, window);
  const auto parsed = parse_generation(ckpt.tokenizer, tokens);

  Suggestion s;
  s.text = parsed.therapist_text;
  s.emotion = parsed.therapist_emotion;
  s.terminated_by_eos = parsed.terminated_by_eos;
  s.raw_token_ids = parsed.raw_token_ids;
  s.gen_config_used = cfg;
  s.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

GenerationConfig default_generation_config(const Checkpoint& ckpt) {
  GenerationConfig cfg;
  const auto& m = ckpt.training_manifest;
  if (m.contains("generation") && m["generation"].is_object()) {
    from_json(m["generation"], cfg);
  }
  return cfg;
}

void to_json(json& j, const GenerationGrid& g) {
  j = json{{"top_p", g.top_p}, {"top_k", g.top_k}, {"temperature", g.temperature}};
}

void from_json(const json& j, GenerationGrid& g) {
  g.top_p = j.value("top_p", g.top_p);
  g.top_k = j.value("top_k", g.top_k);
  g.temperature = j.value("temperature", g.temperature);
}

void to_json(json& j, const GridCell& c) {
  j = json{{"top_p", c.top_p},
           {"top_k", c.top_k},
           {"temperature", c.temperature},
           {"bleu", c.scores.bleu},
           {"rouge1", c.scores.rouge1},
           {"rouge2", c.scores.rouge2},
           {"rougeL", c.scores.rougeL},
           {"combined", c.combined}};
}

void to_json(json& j, const GridResult& r) {
  j = json{{"table", r.table}, {"best_index", r.best_index}, {"best", r.best}};
}

GridResult grid_search(const GenerationGrid& grid, const GenerationConfig& base,
                       const CellEvaluator& evaluate) {
  if (grid.size() == 0) throw InvalidArgument("generation grid is empty");
  GridResult result;
  double best = -std::numeric_limits<double>::infinity();
  for (double p : grid.top_p) {
    for (std::size_t k : grid.top_k) {
      for (double t : grid.temperature) {
        GenerationConfig cfg = base;
        cfg.top_p = p;
        cfg.top_k = k;
        cfg.temperature = t;
        cfg.greedy = false;
        cfg.validate();
        GridCell cell{p, k, t, evaluate(cfg), 0.0};
        cell.combined = cell.scores.combined();
        if (cell.combined > best) {
          best = cell.combined;
          result.best_index = result.table.size();
          result.best = cfg;
        }
        result.table.push_back(cell);
      }
    }
  }
  return result;
}

GridResult grid_search(const Checkpoint& ckpt, std::span<const DialogueExample> val,
                       const GenerationGrid& grid, const GenerationConfig& base,
                       const MetricOptions& metrics) {
  if (val.empty()) throw InvalidArgument("grid search needs a nonempty validation set");
  std::vector<std::string> refs;
  refs.reserve(val.size());
  for (const auto& ex : val) refs.push_back(ex.therapist_text);
  MetricOptions opts = metrics;
  opts.with_meteor = false;
  return grid_search(grid, base, [&](const GenerationConfig& cfg) {
    std::vector<std::string> cands;
    cands.reserve(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) {
      GenerationConfig c = cfg;
      c.seed = derive_seed(cfg.seed, i);
      cands.push_back(generate(ckpt, context_of(val[i]), c).text);
    }
    return lexical_metrics(cands, refs, opts);
  });
}

std::string grid_csv(const GridResult& result) {
  std::ostringstream out;
  out.precision(10);
  out << "top_p,top_k,temperature,bleu,rouge1,rouge2,rougeL,combined\n";
  for (const auto& c : result.table) {
    out << c.top_p << ',' << c.top_k << ',' << c.temperature << ',' << c.scores.bleu << ','
        << c.scores.rouge1 << ',' << c.scores.rouge2 << ',' << c.scores.rougeL << ',' << c.combined
        << '\n';
  }
  return out.str();
}

}  // namespace empathrl
