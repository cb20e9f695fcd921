#include "empathrl/bpe_tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

namespace {

// GPT-2 maps every byte to a printable code point so vocabulary files are
// plain text.
const std::array<std::uint32_t, 256>& byte_to_codepoint() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    std::array<bool, 256> direct{};
    auto mark = [&](int lo, int hi) {
      for (int b = lo; b <= hi; ++b) direct[static_cast<std::size_t>(b)] = true;
    };
    mark('!', '~');
    mark(0xA1, 0xAC);
    mark(0xAE, 0xFF);
    std::uint32_t next = 256;
    for (std::size_t b = 0; b < 256; ++b) {
      t[b] = direct[b] ? static_cast<std::uint32_t>(b) : next++;
    }
    return t;
  }();
  return table;
}

const std::unordered_map<std::uint32_t, unsigned char>& codepoint_to_byte() {
  static const auto table = [] {
    std::unordered_map<std::uint32_t, unsigned char> t;
    const auto& fwd = byte_to_codepoint();
    for (std::size_t b = 0; b < 256; ++b) t.emplace(fwd[b], static_cast<unsigned char>(b));
    return t;
  }();
  return table;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

bool is_ws(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

enum class CharClass { letter, digit, other, space };

CharClass classify(unsigned char c) {
  if (is_ws(c)) return CharClass::space;
  if (is_letter(c)) return CharClass::letter;
  if (is_digit(c)) return CharClass::digit;
  return CharClass::other;
}

std::string merge_key(std::string_view a, std::string_view b) {
  std::string key = std::to_string(a.size());
  key += ':';
  key.append(a);
  key.append(b);
  return key;
}

}  // namespace

std::string bytes_to_unicode_string(std::string_view bytes) {
  std::string out;
  const auto& table = byte_to_codepoint();
  for (unsigned char b : bytes) append_utf8(out, table[b]);
  return out;
}

std::string unicode_string_to_bytes(std::string_view text) {
  std::string out;
  const auto& table = codepoint_to_byte();
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::uint32_t cp = 0;
    std::size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xE0) == 0xC0 && i + 1 < text.size()) {
      cp = ((c & 0x1Fu) << 6) | (static_cast<unsigned char>(text[i + 1]) & 0x3Fu);
      len = 2;
    } else if ((c & 0xF0) == 0xE0 && i + 2 < text.size()) {
      cp = ((c & 0x0Fu) << 12) | ((static_cast<unsigned char>(text[i + 1]) & 0x3Fu) << 6) |
           (static_cast<unsigned char>(text[i + 2]) & 0x3Fu);
      len = 3;
    } else {
      throw ParseError("invalid UTF-8 in byte-level vocabulary entry");
    }
    auto it = table.find(cp);
    if (it == table.end()) throw ParseError("code point outside the byte-level alphabet");
    out += static_cast<char>(it->second);
    i += len;
  }
  return out;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  const std::size_t n = text.size();
  auto at = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  std::size_t i = 0;
  while (i < n) {
    if (text[i] == '\'') {
      bool matched = false;
      for (std::string_view suffix : {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"}) {
        if (text.substr(i).starts_with(suffix)) {
          out.push_back(text.substr(i, suffix.size()));
          i += suffix.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }

    std::size_t start = i;
    std::size_t body = i;
    if (text[i] == ' ' && i + 1 < n && !is_ws(at(i + 1))) body = i + 1;

    const CharClass cls = classify(at(body));
    if (cls != CharClass::space) {
      std::size_t j = body + 1;
      while (j < n && classify(at(j)) == cls) ++j;
      out.push_back(text.substr(start, j - start));
      i = j;
      continue;
    }

    std::size_t j = i;
    while (j < n && is_ws(at(j))) ++j;
    if (j < n && j - i > 1) {
      // Leave the last whitespace character to lead the next word.
      out.push_back(text.substr(i, j - i - 1));
      i = j - 1;
    } else {
      out.push_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

ByteLevelBpe ByteLevelBpe::from_gpt2_files(const std::filesystem::path& vocab_json,
                                           const std::filesystem::path& merges_txt) {
  std::ifstream vin(vocab_json);
  if (!vin) throw IoError("cannot open " + vocab_json.string());
  json vocab = json::parse(vin);

  std::ifstream min(merges_txt);
  if (!min) throw IoError("cannot open " + merges_txt.string());
  std::vector<std::string> merges;
  std::string line;
  while (std::getline(min, line)) {
    if (line.empty() || line.starts_with("#version")) continue;
    merges.push_back(line);
  }
  return from_vocab_and_merges(vocab, merges);
}

ByteLevelBpe ByteLevelBpe::from_vocab_and_merges(const json& vocab,
                                                 std::span<const std::string> merges) {
  ByteLevelBpe tok;
  std::size_t max_id = 0;
  for (const auto& [_, id] : vocab.items()) max_id = std::max(max_id, id.get<std::size_t>());
  tok.id_to_bytes_.assign(max_id + 1, std::string());
  std::vector<bool> seen(max_id + 1, false);
  for (const auto& [text, id_json] : vocab.items()) {
    const auto id = id_json.get<std::size_t>();
    if (seen[id]) throw ParseError("duplicate vocabulary id " + std::to_string(id));
    seen[id] = true;
    if (text.size() > 2 && text.front() == '<' && text.back() == '>' &&
        text.find('|') != std::string::npos) {
      tok.specials_.push_back(text);
      tok.id_to_bytes_[id] = text;
    } else {
      tok.id_to_bytes_[id] = unicode_string_to_bytes(text);
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ParseError("vocabulary ids are not contiguous");
  }
  for (const auto& m : merges) {
    const auto space = m.find(' ');
    if (space == std::string::npos) throw ParseError("malformed merge line '" + m + "'");
    tok.merges_.emplace_back(unicode_string_to_bytes(m.substr(0, space)),
                             unicode_string_to_bytes(m.substr(space + 1)));
  }
  tok.index();
  return tok;
}

void ByteLevelBpe::index() {
  bytes_to_id_.clear();
  for (std::size_t id = 0; id < id_to_bytes_.size(); ++id) {
    const bool special =
        std::find(specials_.begin(), specials_.end(), id_to_bytes_[id]) != specials_.end();
    if (!special) bytes_to_id_.emplace(id_to_bytes_[id], static_cast<TokenId>(id));
  }
  for (int b = 0; b < 256; ++b) {
    if (!bytes_to_id_.contains(std::string(1, static_cast<char>(b)))) {
      throw ParseError("byte-level vocabulary is missing byte " + std::to_string(b));
    }
  }
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_.emplace(merge_key(merges_[r].first, merges_[r].second), r);
  }
}

ByteLevelBpe ByteLevelBpe::train(std::span<const std::string> corpus, std::size_t num_merges,
                                 std::vector<std::string> specials) {
  ByteLevelBpe tok;
  for (int b = 0; b < 256; ++b) tok.id_to_bytes_.emplace_back(1, static_cast<char>(b));

  std::map<std::string, std::size_t> word_freq;
  for (const auto& text : corpus) {
    for (auto piece : pretokenize(text)) ++word_freq[std::string(piece)];
  }
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    std::vector<std::string> symbols;
    for (char c : w) symbols.emplace_back(1, c);
    words.emplace_back(std::move(symbols), f);
  }

  for (std::size_t m = 0; m < num_merges; ++m) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
    for (const auto& [symbols, f] : words) {
      for (std::size_t k = 0; k + 1 < symbols.size(); ++k) pair_freq[{symbols[k], symbols[k + 1]}] += f;
    }
    if (pair_freq.empty()) break;
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    if (best->second < 2) break;
    const auto [a, b] = best->first;
    tok.merges_.emplace_back(a, b);
    tok.id_to_bytes_.push_back(a + b);
    for (auto& [symbols, f] : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t k = 0; k < symbols.size(); ++k) {
        if (k + 1 < symbols.size() && symbols[k] == a && symbols[k + 1] == b) {
          next.push_back(a + b);
          ++k;
        } else {
          next.push_back(symbols[k]);
        }
      }
      symbols = std::move(next);
    }
  }

  for (auto& s : specials) {
    tok.id_to_bytes_.push_back(s);
    tok.specials_.push_back(std::move(s));
  }
  tok.index();
  return tok;
}

std::vector<std::string> ByteLevelBpe::bpe(std::string_view word) const {
  std::vector<std::string> parts;
  parts.reserve(word.size());
  for (char c : word) parts.emplace_back(1, c);
  while (parts.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_pos = 0;
    for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
      auto it = merge_rank_.find(merge_key(parts[k], parts[k + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_pos = k;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const std::string first = parts[best_pos];
    const std::string second = parts[best_pos + 1];
    std::vector<std::string> next;
    next.reserve(parts.size());
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (k + 1 < parts.size() && parts[k] == first && parts[k + 1] == second) {
        next.push_back(first + second);
        ++k;
      } else {
        next.push_back(std::move(parts[k]));
      }
    }
    parts = std::move(next);
  }
  return parts;
}

std::vector<TokenId> ByteLevelBpe::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto piece : pretokenize(text)) {
    for (const auto& sub : bpe(piece)) {
      auto it = bytes_to_id_.find(sub);
      if (it == bytes_to_id_.end()) throw Error("BPE produced a symbol missing from the vocabulary");
      ids.push_back(it->second);
    }
  }
  return ids;
}

std::string ByteLevelBpe::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size()) continue;
    out += id_to_bytes_[static_cast<std::size_t>(id)];
  }
  return sanitize_utf8(out);
}

std::string sanitize_utf8(std::string_view bytes) {
  std::string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  while (i < bytes.size()) {
    const auto b0 = static_cast<unsigned char>(bytes[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= bytes.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(bytes[i + k]);
      ok = (b & 0xC0) == 0x80;
      cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    ok = ok && cp >= kMin[len] && cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF);
    if (ok) {
      out.append(bytes.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

json ByteLevelBpe::to_json() const {
  json vocab = json::object();
  for (std::size_t id = 0; id < id_to_bytes_.size(); ++id) {
    const auto& s = id_to_bytes_[id];
    const bool special = std::find(specials_.begin(), specials_.end(), s) != specials_.end();
    vocab[special ? s : bytes_to_unicode_string(s)] = id;
  }
  json merges = json::array();
  for (const auto& [a, b] : merges_) {
    merges.push_back(bytes_to_unicode_string(a) + " " + bytes_to_unicode_string(b));
  }
  return json{{"kind", "byte_level_bpe"}, {"vocab", vocab}, {"merges", merges}};
}

ByteLevelBpe ByteLevelBpe::from_json(const json& j) {
  const auto merges = j.at("merges").get<std::vector<std::string>>();
  return from_vocab_and_merges(j.at("vocab"), merges);
}

std::shared_ptr<const BaseTokenizer> base_tokenizer_from_json(const json& j) {
  const auto kind = j.value("kind", std::string());
  if (kind == "byte_level_bpe") return std::make_shared<ByteLevelBpe>(ByteLevelBpe::from_json(j));
  throw ParseError("unknown base tokenizer kind '" + kind + "'");
}

}  // namespace empathrl
