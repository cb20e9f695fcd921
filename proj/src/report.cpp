#include "empathrl/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "empathrl/error.hpp"
#include "empathrl/random.hpp"

namespace empathrl {

using nlohmann::json;

std::string_view to_string(DatasetId d) noexcept {
  return d == DatasetId::esconv ? "esconv" : "mesc_test";
}

DatasetId parse_dataset_id(std::string_view s) {
  if (s == "mesc_test" || s == "mesc-test") return DatasetId::mesc_test;
  if (s == "esconv") return DatasetId::esconv;
  throw InvalidArgument("unknown dataset '" + std::string(s) + "' (expected mesc-test or esconv)");
}

void to_json(json& j, const EvalOutput& o) {
  j = json{{"context", o.context},
           {"candidate", o.candidate},
           {"reference", o.reference},
           {"predicted_emotion", o.predicted_emotion ? json(to_string(*o.predicted_emotion)) : json(nullptr)},
           {"gold_emotion", to_string(o.gold_emotion)}};
}

void from_json(const json& j, EvalOutput& o) {
  o.context = j.value("context", std::string());
  o.candidate = j.at("candidate").get<std::string>();
  o.reference = j.at("reference").get<std::string>();
  const auto pred = j.find("predicted_emotion");
  o.predicted_emotion = pred != j.end() && pred->is_string() ? try_parse_emotion(pred->get<std::string>()) : std::nullopt;
  o.gold_emotion = parse_emotion(j.value("gold_emotion", std::string("neutral")));
}

std::vector<EvalOutput> read_outputs_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EvalOutput> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<EvalOutput>());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void to_json(json& j, const EvalReport& r) {
  j = json{{"model_id", r.model_id},
           {"dataset_id", to_string(r.dataset_id)},
           {"bleu", r.bleu},
           {"rouge1", r.rouge1},
           {"rouge2", r.rouge2},
           {"rougeL", r.rougeL},
           {"meteor", r.meteor},
           {"emotion_accuracy", r.emotion_accuracy},
           {"n_samples", r.n_samples}};
  if (r.judge) j["judge"] = *r.judge;
}

void from_json(const json& j, EvalReport& r) {
  r.model_id = j.at("model_id").get<std::string>();
  r.dataset_id = parse_dataset_id(j.at("dataset_id").get<std::string>());
  r.bleu = j.at("bleu").get<double>();
  r.rouge1 = j.at("rouge1").get<double>();
  r.rouge2 = j.at("rouge2").get<double>();
  r.rougeL = j.at("rougeL").get<double>();
  r.meteor = j.at("meteor").get<double>();
  r.emotion_accuracy = j.at("emotion_accuracy").get<double>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.judge.reset();
  if (j.contains("judge")) {
    const auto& jj = j.at("judge");
    JudgeScore s;
    for (std::size_t c = 0; c < kJudgeCriteria; ++c) {
      s.means[c] = jj.at("means").at(std::string(kJudgeCriterionNames[c])).get<double>();
    }
    s.n_samples = jj.at("n_samples").get<std::size_t>();
    s.n_valid = jj.at("n_valid").get<std::size_t>();
    s.n_invalid = jj.at("n_invalid").get<std::size_t>();
    s.n_retries = jj.at("n_retries").get<std::size_t>();
    r.judge = std::move(s);
  }
}

std::vector<EvalOutput> generate_outputs(const Checkpoint& ckpt, std::span<const DialogueExample> examples,
                                         const GenerationConfig& cfg) {
  std::vector<EvalOutput> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    GenerationConfig per = cfg;
    per.seed = derive_seed(cfg.seed, i);
    const auto s = generate(ckpt, context_of(ex), per);
    out.push_back(EvalOutput{"[" + ex.problem_type + "] " + ex.user_text + " (" +
                                 std::string(to_string(ex.user_emotion)) + ")",
                             s.text, ex.therapist_text, s.emotion, ex.therapist_emotion});
  }
  return out;
}

EvalReport build_report(std::string model_id, DatasetId dataset, std::span<const EvalOutput> outputs,
                        const MetricOptions& options) {
  if (outputs.empty()) throw InvalidArgument("build_report: no outputs");
  std::vector<std::string> candidates, references;
  std::vector<std::optional<Emotion>> predicted;
  std::vector<Emotion> gold;
  for (const auto& o : outputs) {
    candidates.push_back(o.candidate);
    references.push_back(o.reference);
    predicted.push_back(o.predicted_emotion);
    gold.push_back(o.gold_emotion);
  }
  const auto m = lexical_metrics(candidates, references, options);
  EvalReport r;
  r.model_id = std::move(model_id);
  r.dataset_id = dataset;
  r.bleu = m.bleu;
  r.rouge1 = m.rouge1;
  r.rouge2 = m.rouge2;
  r.rougeL = m.rougeL;
  r.meteor = m.meteor;
  r.emotion_accuracy = emotion_accuracy(predicted, gold);
  r.n_samples = outputs.size();
  return r;
}

std::vector<DialogueExample> esconv_examples(std::span<const EsconvConversation> conversations,
                                             const EmotionClassifier& classifier,
                                             const EmotionMapper& mapper) {
  std::vector<DialogueExample> out;
  for (const auto& conv : conversations) {
    if (conv.utterances.empty()) continue;
    const auto emotions = annotate_esconv_emotions(conv.utterances, classifier, mapper);
    std::vector<DialogueTurn> turns;
    for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
      turns.push_back(DialogueTurn{conv.speakers[i], conv.utterances[i], emotions[i]});
    }
    Dialogue d;
    d.problem_type = conv.problem_type;
    d.turns = merge_consecutive_turns(turns);
    d.split = Split::test;
    auto examples = build_examples(d);
    out.insert(out.end(), examples.begin(), examples.end());
  }
  return out;
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string render_tables(std::span<const EvalReport> reports) {
  std::ostringstream md;
  md << "## Automated metrics\n\n"
     << "| Model | Dataset | N | BLEU | ROUGE-1 | ROUGE-2 | ROUGE-L | METEOR |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    md << "| " << r.model_id << " | " << to_string(r.dataset_id) << " | " << r.n_samples << " | "
       << fmt4(r.bleu) << " | " << fmt4(r.rouge1) << " | " << fmt4(r.rouge2) << " | " << fmt4(r.rougeL)
       << " | " << fmt4(r.meteor) << " |\n";
  }
  md << "\n## Emotion token accuracy\n\n| Model | Dataset | Accuracy |\n|---|---|---|\n";
  for (const auto& r : reports) {
    md << "| " << r.model_id << " | " << to_string(r.dataset_id) << " | " << fmt4(r.emotion_accuracy)
       << " |\n";
  }
  bool any_judge = false;
  for (const auto& r : reports) any_judge = any_judge || r.judge.has_value();
  if (any_judge) {
    md << "\n## Judge scores (1-5)\n\n| Model | Dataset";
    for (auto name : kJudgeCriterionNames) md << " | " << name;
    md << " | valid | invalid |\n|---|---";
    for (std::size_t c = 0; c < kJudgeCriteria + 2; ++c) md << "|---";
    md << "|\n";
    for (const auto& r : reports) {
      if (!r.judge) continue;
      md << "| " << r.model_id << " | " << to_string(r.dataset_id);
      for (double m : r.judge->means) md << " | " << fmt4(m);
      md << " | " << r.judge->n_valid << " | " << r.judge->n_invalid << " |\n";
    }
  }
  return md.str();
}

void write_reports(const std::filesystem::path& dir, std::span<const EvalReport> reports) {
  std::filesystem::create_directories(dir);
  write_json_file(dir / "eval_report.json", json(std::vector<EvalReport>(reports.begin(), reports.end())));
  {
    std::ofstream md(dir / "tables.md");
    if (!md) throw IoError("cannot write " + (dir / "tables.md").string());
    md << render_tables(reports);
  }
  bool has_records = false;
  for (const auto& r : reports) has_records = has_records || (r.judge && !r.judge->records.empty());
  if (!has_records) return;
  std::ofstream raw(dir / "judge_raw.jsonl");
  if (!raw) throw IoError("cannot write " + (dir / "judge_raw.jsonl").string());
  for (const auto& r : reports) {
    if (!r.judge) continue;
    for (const auto& rec : r.judge->records) {
      json row = rec;
      row["model_id"] = r.model_id;
      row["dataset_id"] = to_string(r.dataset_id);
      raw << row.dump() << '\n';
    }
  }
}

}  // namespace empathrl
