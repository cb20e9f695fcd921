#include "empathrl/encoding.hpp"

#include <algorithm>
#include <fstream>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

namespace {
constexpr std::array<std::string_view, 8> kMarkerText = {
    "<bos>",  "<eos>",          "<pad>",       "<problem>",
    "<user>", "<user_emotion>", "<therapist>", "<therapist_emotion>",
};
}  // namespace

std::string_view marker_text(Marker m) noexcept { return kMarkerText[static_cast<std::size_t>(m)]; }

ExtendedTokenizer::ExtendedTokenizer(std::shared_ptr<const BaseTokenizer> base)
    : base_(std::move(base)), base_size_(base_->vocab_size()) {}

ExtendedTokenizer ExtendedTokenizer::extend(std::shared_ptr<const BaseTokenizer> base) {
  if (!base) throw InvalidArgument("extend_vocabulary: no base tokenizer");
  const auto specials = base->special_tokens();
  auto collides = [&](std::string_view s) {
    return std::find(specials.begin(), specials.end(), s) != specials.end();
  };
  for (auto m : kAllMarkers) {
    if (collides(marker_text(m))) {
      throw InvalidArgument("added token " + std::string(marker_text(m)) +
                            " collides with a base special token");
    }
  }
  for (auto e : kAllEmotions) {
    if (collides(to_string(e))) {
      throw InvalidArgument("added token " + std::string(to_string(e)) +
                            " collides with a base special token");
    }
  }
  return ExtendedTokenizer(std::move(base));
}

TokenId ExtendedTokenizer::id(Marker m) const noexcept {
  return static_cast<TokenId>(base_size_ + static_cast<std::size_t>(m));
}

TokenId ExtendedTokenizer::id(Emotion e) const noexcept {
  return static_cast<TokenId>(base_size_ + kAllMarkers.size() + static_cast<std::size_t>(e));
}

std::optional<Emotion> ExtendedTokenizer::emotion_of(TokenId id) const noexcept {
  const auto first = static_cast<TokenId>(base_size_ + kAllMarkers.size());
  if (id < first || id >= first + static_cast<TokenId>(kAllEmotions.size())) return std::nullopt;
  return static_cast<Emotion>(id - first);
}

std::optional<Marker> ExtendedTokenizer::marker_of(TokenId id) const noexcept {
  const auto first = static_cast<TokenId>(base_size_);
  if (id < first || id >= first + static_cast<TokenId>(kAllMarkers.size())) return std::nullopt;
  return static_cast<Marker>(id - first);
}

bool ExtendedTokenizer::is_added(TokenId id) const noexcept {
  return id >= static_cast<TokenId>(base_size_) && id < static_cast<TokenId>(total_vocab_size());
}

std::vector<TokenId> ExtendedTokenizer::encode_text(std::string_view text) const {
  return base_->encode(text);
}

std::vector<TokenId> ExtendedTokenizer::encode(std::string_view markup) const {
  std::vector<TokenId> out;
  std::string_view rest = markup;
  bool emotion_slot = false;
  auto flush_text = [&](std::string_view text) {
    if (text.empty()) return;
    auto ids = base_->encode(text);
    out.insert(out.end(), ids.begin(), ids.end());
  };

  while (!rest.empty()) {
    if (emotion_slot) {
      emotion_slot = false;
      bool matched = false;
      for (auto e : kAllEmotions) {
        const auto word = to_string(e);
        if (!rest.starts_with(word)) continue;
        const auto after = rest.substr(word.size());
        if (after.empty() || after.front() == '<' || after.front() == ' ' || after.front() == '\n') {
          out.push_back(id(e));
          rest.remove_prefix(word.size());
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }

    // Find the earliest marker occurrence.
    std::size_t best_pos = std::string_view::npos;
    Marker best_marker = Marker::bos;
    for (auto m : kAllMarkers) {
      const auto pos = rest.find(marker_text(m));
      if (pos < best_pos) {
        best_pos = pos;
        best_marker = m;
      }
    }
    if (best_pos == std::string_view::npos) {
      flush_text(rest);
      break;
    }
    flush_text(rest.substr(0, best_pos));
    out.push_back(id(best_marker));
    rest.remove_prefix(best_pos + marker_text(best_marker).size());
    emotion_slot = best_marker == Marker::user_emotion || best_marker == Marker::therapist_emotion;
  }
  return out;
}

namespace {

template <typename MarkerFn>
std::string decode_impl(const ExtendedTokenizer& tok, std::span<const TokenId> ids,
                        MarkerFn on_marker) {
  std::string out;
  std::vector<TokenId> run;
  auto flush = [&] {
    if (run.empty()) return;
    out += tok.base().decode(run);
    run.clear();
  };
  for (auto id : ids) {
    if (auto m = tok.marker_of(id)) {
      flush();
      on_marker(out, *m);
    } else if (auto e = tok.emotion_of(id)) {
      flush();
      out += to_string(*e);
    } else {
      run.push_back(id);
    }
  }
  flush();
  return out;
}

}  // namespace

std::string ExtendedTokenizer::decode(std::span<const TokenId> ids) const {
  return decode_impl(*this, ids, [](std::string& out, Marker m) { out += marker_text(m); });
}

std::string ExtendedTokenizer::decode_text(std::span<const TokenId> ids) const {
  return decode_impl(*this, ids, [](std::string&, Marker) {});
}

json ExtendedTokenizer::manifest() const {
  json tokens = json::array();
  for (auto m : kAllMarkers) {
    tokens.push_back(json{{"token", marker_text(m)}, {"id", id(m)}, {"kind", "structural"}});
  }
  for (auto e : kAllEmotions) {
    tokens.push_back(json{{"token", to_string(e)}, {"id", id(e)}, {"kind", "emotion"}});
  }
  return json{{"base_vocab_size", base_size_},
              {"total_vocab_size", total_vocab_size()},
              {"added_tokens", tokens}};
}

void ExtendedTokenizer::verify_manifest(const json& manifest) const {
  if (manifest != this->manifest()) {
    throw ParseError("tokenizer manifest does not match the base tokenizer");
  }
}

PromptContext context_of(const DialogueExample& ex) {
  return PromptContext{ex.problem_type, ex.user_text, ex.user_emotion};
}

std::size_t EncodedExample::length() const noexcept {
  return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), 1));
}

std::size_t EncodedExample::labeled_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](TokenId l) { return l != kIgnoreIndex; }));
}

void to_json(json& j, const EncodedExample& ex) {
  j = json{{"token_ids", ex.token_ids}, {"attention_mask", ex.attention_mask}, {"labels", ex.labels}};
}

void from_json(const json& j, EncodedExample& ex) {
  ex.token_ids = j.at("token_ids").get<std::vector<TokenId>>();
  ex.attention_mask = j.at("attention_mask").get<std::vector<std::uint8_t>>();
  ex.labels = j.at("labels").get<std::vector<TokenId>>();
}

namespace {

std::vector<TokenId> prompt_tokens(const ExtendedTokenizer& tok, const PromptContext& ctx) {
  std::vector<TokenId> seq;
  auto append = [&](const std::vector<TokenId>& ids) { seq.insert(seq.end(), ids.begin(), ids.end()); };
  seq.push_back(tok.id(Marker::bos));
  seq.push_back(tok.id(Marker::problem));
  append(tok.encode_text(ctx.problem_type));
  seq.push_back(tok.id(Marker::user));
  append(tok.encode_text(ctx.user_text));
  seq.push_back(tok.id(Marker::user_emotion));
  seq.push_back(tok.id(ctx.user_emotion));
  seq.push_back(tok.id(Marker::therapist));
  return seq;
}

}  // namespace

std::vector<TokenId> training_sequence(const ExtendedTokenizer& tok, const DialogueExample& ex,
                                       bool include_therapist_emotion) {
  auto seq = prompt_tokens(tok, context_of(ex));
  auto text = tok.encode_text(ex.therapist_text);
  seq.insert(seq.end(), text.begin(), text.end());
  if (include_therapist_emotion) {
    seq.push_back(tok.id(Marker::therapist_emotion));
    seq.push_back(tok.id(ex.therapist_emotion));
  }
  seq.push_back(tok.id(Marker::eos));
  return seq;
}

std::optional<EncodedExample> encode_example(const ExtendedTokenizer& tok, const DialogueExample& ex,
                                             bool include_therapist_emotion, std::size_t max_len) {
  const auto prompt = prompt_tokens(tok, context_of(ex));
  if (prompt.size() + 1 > max_len) {
    throw ContextTooLong("context of " + std::to_string(prompt.size()) +
                         " tokens leaves no room for a response within " +
                         std::to_string(max_len));
  }
  auto seq = training_sequence(tok, ex, include_therapist_emotion);
  if (seq.size() > max_len) return std::nullopt;

  EncodedExample out;
  out.token_ids.assign(max_len, tok.id(Marker::pad));
  out.attention_mask.assign(max_len, 0);
  out.labels.assign(max_len, kIgnoreIndex);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out.token_ids[i] = seq[i];
    out.attention_mask[i] = 1;
    // Everything up to and including <therapist> is context.
    if (i >= prompt.size()) out.labels[i] = seq[i];
  }
  return out;
}

std::vector<TokenId> build_inference_prompt(const ExtendedTokenizer& tok, const PromptContext& ctx,
                                            std::size_t max_len) {
  auto prompt = prompt_tokens(tok, ctx);
  if (prompt.size() >= max_len) {
    throw ContextTooLong("prompt of " + std::to_string(prompt.size()) +
                         " tokens does not fit the " + std::to_string(max_len) + "-token window");
  }
  return prompt;
}

GenerationResult parse_generation(const ExtendedTokenizer& tok, std::span<const TokenId> generated) {
  GenerationResult result;
  result.raw_token_ids.assign(generated.begin(), generated.end());

  const auto eos = tok.id(Marker::eos);
  const auto eos_it = std::find(generated.begin(), generated.end(), eos);
  result.terminated_by_eos = eos_it != generated.end();
  const std::span<const TokenId> body(generated.begin(), eos_it);

  const auto marker = tok.id(Marker::therapist_emotion);
  const auto marker_it = std::find(body.begin(), body.end(), marker);
  const std::span<const TokenId> text_ids(body.begin(), marker_it);
  if (marker_it != body.end() && marker_it + 1 != body.end()) {
    result.therapist_emotion = tok.emotion_of(*(marker_it + 1));
  }

  std::string text = tok.decode_text(text_ids);
  const auto first = text.find_first_not_of(" \t\n\r");
  const auto last = text.find_last_not_of(" \t\n\r");
  result.therapist_text = first == std::string::npos ? std::string() : text.substr(first, last - first + 1);
  return result;
}

void write_encoded_jsonl(const std::filesystem::path& path, std::span<const EncodedExample> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& row : rows) out << json(row).dump() << '\n';
}

std::vector<EncodedExample> read_encoded_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EncodedExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<EncodedExample>());
  }
  return out;
}

}  // namespace empathrl
