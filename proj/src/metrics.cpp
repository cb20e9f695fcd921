#include "empathrl/metrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

namespace {

using NgramCounts = std::map<std::vector<std::string_view>, std::size_t>;

NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<std::string_view> key;
    key.reserve(n);
    for (std::size_t k = 0; k < n; ++k) key.emplace_back(tokens[i + k]);
    ++counts[key];
  }
  return counts;
}

void check_pairs(std::size_t a, std::size_t b) {
  if (a != b) throw InvalidArgument("candidate and reference counts differ");
  if (a == 0) throw InvalidArgument("metric input is empty");
}

double brevity_penalty(std::size_t ref_len, std::size_t hyp_len) {
  if (hyp_len > ref_len) return 1.0;
  if (hyp_len == 0) return 0.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

double bleu_from_counts(const std::array<std::size_t, 5>& num, const std::array<std::size_t, 5>& den,
                        std::size_t hyp_len, std::size_t ref_len, double epsilon, std::size_t orders = 4) {
  if (num[1] == 0 || orders == 0) return 0.0;
  const double weight = 1.0 / static_cast<double>(orders);
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const double p = num[n] == 0 ? epsilon / static_cast<double>(den[n])
                                 : static_cast<double>(num[n]) / static_cast<double>(den[n]);
    log_sum += weight * std::log(p);
  }
  return brevity_penalty(ref_len, hyp_len) * std::exp(log_sum);
}

}  // namespace

std::pair<std::size_t, std::size_t> modified_precision(std::span<const std::string> candidate,
                                                       std::span<const std::string> reference,
                                                       std::size_t n) {
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t clipped = 0;
  std::size_t total = 0;
  for (const auto& [gram, count] : cand) {
    total += count;
    const auto it = ref.find(gram);
    if (it != ref.end()) clipped += std::min(count, it->second);
  }
  return {clipped, std::max<std::size_t>(1, total)};
}

double sentence_bleu(std::span<const std::string> candidate, std::span<const std::string> reference,
                     double epsilon) {
  std::array<std::size_t, 5> num{};
  std::array<std::size_t, 5> den{};
  for (std::size_t n = 1; n <= 4; ++n) {
    std::tie(num[n], den[n]) = modified_precision(candidate, reference, n);
  }
  // Orders longer than the candidate have no n-grams at all; they are left out
  // of the geometric mean rather than smoothed.
  const std::size_t orders = std::min<std::size_t>(4, candidate.size());
  return bleu_from_counts(num, den, candidate.size(), reference.size(), epsilon, orders);
}

double bleu(std::span<const std::string> candidates, std::span<const std::string> references,
            BleuMode mode, double epsilon) {
  check_pairs(candidates.size(), references.size());
  if (mode == BleuMode::sentence_mean) {
    double sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto c = metric_tokens(candidates[i]);
      const auto r = metric_tokens(references[i]);
      sum += sentence_bleu(c, r, epsilon);
    }
    return sum / static_cast<double>(candidates.size());
  }
  std::array<std::size_t, 5> num{};
  std::array<std::size_t, 5> den{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = metric_tokens(candidates[i]);
    const auto r = metric_tokens(references[i]);
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto [a, b] = modified_precision(c, r, n);
      num[n] += a;
      den[n] += b;
    }
    hyp_len += c.size();
    ref_len += r.size();
  }
  return bleu_from_counts(num, den, hyp_len, ref_len, epsilon);
}

double rouge_n_f1(std::span<const std::string> candidate, std::span<const std::string> reference,
                  std::size_t n) {
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  std::size_t cand_total = 0;
  std::size_t ref_total = 0;
  for (const auto& [gram, count] : cand) {
    cand_total += count;
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(count, it->second);
  }
  for (const auto& [gram, count] : ref) ref_total += count;
  const double p = static_cast<double>(overlap) / static_cast<double>(std::max<std::size_t>(cand_total, 1));
  const double r = static_cast<double>(overlap) / static_cast<double>(std::max<std::size_t>(ref_total, 1));
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double rouge_l_f1(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t m = reference.size();
  const std::size_t n = candidate.size();
  std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = reference[i - 1] == candidate[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const auto lcs = static_cast<double>(prev[n]);
  const double p = lcs / static_cast<double>(n);
  const double r = lcs / static_cast<double>(m);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double rouge(std::span<const std::string> candidates, std::span<const std::string> references,
             RougeMode mode) {
  check_pairs(candidates.size(), references.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = metric_tokens(candidates[i]);
    const auto r = metric_tokens(references[i]);
    switch (mode) {
      case RougeMode::rouge1: sum += rouge_n_f1(c, r, 1); break;
      case RougeMode::rouge2: sum += rouge_n_f1(c, r, 2); break;
      case RougeMode::rougeL: sum += rouge_l_f1(c, r); break;
    }
  }
  return sum / static_cast<double>(candidates.size());
}

// ---------------------------------------------------------------------------
// Porter stemmer

namespace {

bool is_consonant(std::string_view w, std::size_t i) {
  switch (w[i]) {
    case 'a': case 'e': case 'i': case 'o': case 'u': return false;
    case 'y': return i == 0 ? true : !is_consonant(w, i - 1);
    default: return true;
  }
}

std::size_t measure(std::string_view stem) {
  std::size_t m = 0;
  bool prev_vowel = false;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    const bool c = is_consonant(stem, i);
    if (c && prev_vowel) ++m;
    prev_vowel = !c;
  }
  return m;
}

bool contains_vowel(std::string_view stem) {
  for (std::size_t i = 0; i < stem.size(); ++i) {
    if (!is_consonant(stem, i)) return true;
  }
  return false;
}

bool ends_double_consonant(std::string_view w) {
  return w.size() >= 2 && w[w.size() - 1] == w[w.size() - 2] && is_consonant(w, w.size() - 1);
}

bool ends_cvc(std::string_view w) {
  const std::size_t n = w.size();
  return n >= 3 && is_consonant(w, n - 3) && !is_consonant(w, n - 2) && is_consonant(w, n - 1) &&
         w[n - 1] != 'w' && w[n - 1] != 'x' && w[n - 1] != 'y';
}

struct Rule {
  std::string_view suffix;
  std::string_view replacement;
  std::size_t min_measure;  // stem measure must exceed this
};

/// Applies the first rule whose suffix matches; a failed condition stops the search.
std::string apply_rules(std::string word, std::span<const Rule> rules) {
  for (const auto& r : rules) {
    if (!word.ends_with(r.suffix)) continue;
    const std::string_view stem(word.data(), word.size() - r.suffix.size());
    if (measure(stem) > r.min_measure) return std::string(stem) + std::string(r.replacement);
    return word;
  }
  return word;
}

std::string step1a(std::string w) {
  for (auto [suffix, repl] : {std::pair<std::string_view, std::string_view>{"sses", "ss"},
                              {"ies", "i"}, {"ss", "ss"}, {"s", ""}}) {
    if (w.ends_with(suffix)) return w.substr(0, w.size() - suffix.size()) + std::string(repl);
  }
  return w;
}

std::string step1b(std::string w) {
  if (w.ends_with("eed")) {
    const std::string stem = w.substr(0, w.size() - 3);
    return measure(stem) > 0 ? stem + "ee" : w;
  }
  std::string stem;
  bool ok = false;
  for (std::string_view suffix : {"ed", "ing"}) {
    if (w.ends_with(suffix)) {
      stem = w.substr(0, w.size() - suffix.size());
      if (contains_vowel(stem)) {
        ok = true;
        break;
      }
    }
  }
  if (!ok) return w;
  if (stem.ends_with("at")) return stem.substr(0, stem.size() - 2) + "ate";
  if (stem.ends_with("bl")) return stem.substr(0, stem.size() - 2) + "ble";
  if (stem.ends_with("iz")) return stem.substr(0, stem.size() - 2) + "ize";
  if (ends_double_consonant(stem)) {
    const char last = stem.back();
    if (last != 'l' && last != 's' && last != 'z') return stem.substr(0, stem.size() - 2) + last;
    return stem;
  }
  if (measure(stem) == 1 && ends_cvc(stem)) return stem + "e";
  return stem;
}

std::string step1c(std::string w) {
  if (w.ends_with("y")) {
    const std::string stem = w.substr(0, w.size() - 1);
    if (contains_vowel(stem)) return stem + "i";
  }
  return w;
}

constexpr Rule kStep2[] = {
    {"ational", "ate", 0}, {"tional", "tion", 0}, {"enci", "ence", 0}, {"anci", "ance", 0},
    {"izer", "ize", 0},    {"abli", "able", 0},   {"alli", "al", 0},   {"entli", "ent", 0},
    {"eli", "e", 0},       {"ousli", "ous", 0},   {"ization", "ize", 0}, {"ation", "ate", 0},
    {"ator", "ate", 0},    {"alism", "al", 0},    {"iveness", "ive", 0}, {"fulness", "ful", 0},
    {"ousness", "ous", 0}, {"aliti", "al", 0},    {"iviti", "ive", 0}, {"biliti", "ble", 0},
};

constexpr Rule kStep3[] = {
    {"icate", "ic", 0}, {"ative", "", 0}, {"alize", "al", 0}, {"iciti", "ic", 0},
    {"ical", "ic", 0},  {"ful", "", 0},   {"ness", "", 0},
};

std::string step4(std::string w) {
  static constexpr std::string_view kSuffixes[] = {"al",  "ance", "ence", "er",  "ic",  "able", "ible",
                                                   "ant", "ement", "ment", "ent", "ion", "ou",  "ism",
                                                   "ate", "iti",  "ous",  "ive", "ize"};
  for (auto suffix : kSuffixes) {
    if (!w.ends_with(suffix)) continue;
    const std::string stem = w.substr(0, w.size() - suffix.size());
    bool ok = measure(stem) > 1;
    if (suffix == "ion") ok = ok && !stem.empty() && (stem.back() == 's' || stem.back() == 't');
    return ok ? stem : w;
  }
  return w;
}

std::string step5a(std::string w) {
  if (w.ends_with("e")) {
    const std::string stem = w.substr(0, w.size() - 1);
    const auto m = measure(stem);
    if (m > 1) return stem;
    if (m == 1 && !ends_cvc(stem)) return stem;
  }
  return w;
}

std::string step5b(std::string w) {
  if (w.ends_with("ll") && measure(std::string_view(w).substr(0, w.size() - 1)) > 1) {
    return w.substr(0, w.size() - 1);
  }
  return w;
}

}  // namespace

std::string porter_stem(std::string_view word) {
  std::string w(word);
  std::transform(w.begin(), w.end(), w.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (w.empty()) return w;
  w = step1a(std::move(w));
  w = step1b(std::move(w));
  w = step1c(std::move(w));
  w = apply_rules(std::move(w), kStep2);
  w = apply_rules(std::move(w), kStep3);
  w = step4(std::move(w));
  w = step5a(std::move(w));
  w = step5b(std::move(w));
  return w;
}

// ---------------------------------------------------------------------------
// Synonyms and METEOR

SynonymTable::SynonymTable(std::vector<std::vector<std::string>> groups) : groups_(std::move(groups)) {
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (const auto& w : groups_[g]) index_[w].push_back(g);
  }
}

const SynonymTable& SynonymTable::builtin() {
  static const SynonymTable table({
      {"happy", "glad", "joyful", "cheerful"},
      {"sad", "unhappy", "sorrowful", "down"},
      {"afraid", "scared", "frightened", "fearful"},
      {"angry", "mad", "furious"},
      {"talk", "speak", "chat"},
      {"help", "assist", "aid", "support"},
      {"hard", "difficult", "tough"},
      {"big", "large", "huge"},
      {"small", "little", "tiny"},
      {"begin", "start", "commence"},
      {"end", "finish", "stop"},
      {"feel", "experience"},
      {"think", "believe", "reckon"},
      {"worried", "anxious", "nervous"},
      {"tired", "exhausted", "weary"},
      {"calm", "relaxed", "peaceful"},
      {"friend", "companion", "pal"},
      {"job", "work", "occupation"},
      {"kid", "child"},
      {"mom", "mother"},
      {"dad", "father"},
      {"maybe", "perhaps"},
      {"quick", "fast", "rapid"},
      {"understand", "comprehend", "grasp"},
      {"okay", "ok", "fine", "alright"},
  });
  return table;
}

SynonymTable SynonymTable::from_json(const json& j) {
  return SynonymTable(j.get<std::vector<std::vector<std::string>>>());
}

json SynonymTable::to_json() const { return groups_; }

std::set<std::string, std::less<>> SynonymTable::synonyms(std::string_view word) const {
  std::set<std::string, std::less<>> out;
  out.emplace(word);
  const auto it = index_.find(word);
  if (it == index_.end()) return out;
  for (auto g : it->second) out.insert(groups_[g].begin(), groups_[g].end());
  return out;
}

namespace {

using Enumerated = std::vector<std::pair<std::size_t, std::string>>;
using Alignment = std::vector<std::pair<std::size_t, std::size_t>>;

/// Greedy matching from the end of both lists; matched entries are removed.
template <typename Eq>
void match_stage(Enumerated& hyp, Enumerated& ref, Alignment& matches, Eq&& equal) {
  for (std::size_t i = hyp.size(); i-- > 0;) {
    for (std::size_t j = ref.size(); j-- > 0;) {
      if (equal(hyp[i].second, ref[j].second)) {
        matches.emplace_back(hyp[i].first, ref[j].first);
        hyp.erase(hyp.begin() + static_cast<std::ptrdiff_t>(i));
        ref.erase(ref.begin() + static_cast<std::ptrdiff_t>(j));
        break;
      }
    }
  }
}

std::size_t count_chunks(const Alignment& matches) {
  std::size_t chunks = 1;
  for (std::size_t i = 0; i + 1 < matches.size(); ++i) {
    const bool adjacent = matches[i + 1].first == matches[i].first + 1 &&
                          matches[i + 1].second == matches[i].second + 1;
    if (!adjacent) ++chunks;
  }
  return chunks;
}

}  // namespace

double single_meteor(std::span<const std::string> candidate, std::span<const std::string> reference,
                     const SynonymTable& synonyms, const MeteorParams& params) {
  Enumerated hyp;
  Enumerated ref;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    std::string w = candidate[i];
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    hyp.emplace_back(i, std::move(w));
  }
  for (std::size_t i = 0; i < reference.size(); ++i) {
    std::string w = reference[i];
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    ref.emplace_back(i, std::move(w));
  }
  const std::size_t hyp_len = hyp.size();
  const std::size_t ref_len = ref.size();
  if (hyp_len == 0 || ref_len == 0) return 0.0;

  Alignment matches;
  auto same = [](const std::string& a, const std::string& b) { return a == b; };
  match_stage(hyp, ref, matches, same);
  for (auto& e : hyp) e.second = porter_stem(e.second);
  for (auto& e : ref) e.second = porter_stem(e.second);
  match_stage(hyp, ref, matches, same);
  // The synonym stage sees the stemmed leftovers.
  std::set<std::string, std::less<>> cached;
  std::string cached_for;
  auto synonym = [&](const std::string& h, const std::string& r) {
    if (cached.empty() || cached_for != h) {
      cached = synonyms.synonyms(h);
      cached_for = h;
    }
    return cached.contains(r);
  };
  match_stage(hyp, ref, matches, synonym);

  if (matches.empty()) return 0.0;
  std::sort(matches.begin(), matches.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto m = static_cast<double>(matches.size());
  const double precision = m / static_cast<double>(hyp_len);
  const double recall = m / static_cast<double>(ref_len);
  const double fmean = precision * recall / (params.alpha * precision + (1.0 - params.alpha) * recall);
  const double frag = static_cast<double>(count_chunks(matches)) / m;
  const double penalty = params.gamma * std::pow(frag, params.beta);
  return (1.0 - penalty) * fmean;
}

double meteor(std::span<const std::string> candidates, std::span<const std::string> references,
              const SynonymTable& synonyms, const MeteorParams& params) {
  check_pairs(candidates.size(), references.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    sum += single_meteor(metric_tokens(candidates[i]), metric_tokens(references[i]), synonyms, params);
  }
  return sum / static_cast<double>(candidates.size());
}

double emotion_accuracy(std::span<const std::optional<Emotion>> predictions,
                        std::span<const Emotion> golds) {
  check_pairs(predictions.size(), golds.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (predictions[i] && *predictions[i] == golds[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(golds.size());
}

void to_json(json& j, const MetricScores& m) {
  j = json{{"bleu", m.bleu},     {"rouge1", m.rouge1}, {"rouge2", m.rouge2},
           {"rougeL", m.rougeL}, {"meteor", m.meteor}, {"combined", m.combined()}};
}

void from_json(const json& j, MetricScores& m) {
  m.bleu = j.at("bleu").get<double>();
  m.rouge1 = j.at("rouge1").get<double>();
  m.rouge2 = j.at("rouge2").get<double>();
  m.rougeL = j.at("rougeL").get<double>();
  m.meteor = j.value("meteor", 0.0);
}

MetricScores lexical_metrics(std::span<const std::string> candidates,
                             std::span<const std::string> references, const MetricOptions& options) {
  MetricScores s;
  s.bleu = bleu(candidates, references, options.bleu_mode, options.bleu_epsilon);
  s.rouge1 = rouge(candidates, references, RougeMode::rouge1);
  s.rouge2 = rouge(candidates, references, RougeMode::rouge2);
  s.rougeL = rouge(candidates, references, RougeMode::rougeL);
  if (options.with_meteor) {
    s.meteor = meteor(candidates, references,
                      options.synonyms ? *options.synonyms : SynonymTable::builtin());
  }
  return s;
}

}  // namespace empathrl
