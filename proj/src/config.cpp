#include "empathrl/config.hpp"

#include "empathrl/checkpoint.hpp"
#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

MetricOptions EvalSection::metric_options() const {
  MetricOptions m;
  if (bleu_mode == "sentence") {
    m.bleu_mode = BleuMode::sentence_mean;
  } else if (bleu_mode == "corpus") {
    m.bleu_mode = BleuMode::corpus;
  } else {
    throw InvalidArgument("eval.bleu_mode must be 'sentence' or 'corpus'");
  }
  m.bleu_epsilon = bleu_epsilon;
  m.with_meteor = meteor;
  return m;
}

json to_json(const PipelineConfig& c) {
  json generation = c.generation;
  generation["grid"] = c.grid;
  return json{
      {"seed", c.seed},
      {"corpus",
       {{"mesc_path", c.corpus.mesc_path},
        {"esconv_path", c.corpus.esconv_path},
        {"emotion_map_path", c.corpus.emotion_map_path},
        {"out_dir", c.corpus.out_dir},
        {"coverage_threshold", c.corpus.coverage_threshold}}},
      {"encoding", {{"max_len", c.encoding.max_len}, {"bpe_merges", c.encoding.bpe_merges}}},
      {"sft", c.sft},
      {"rl", c.rl},
      {"reward", c.reward},
      {"generation", generation},
      {"eval",
       {{"bleu_mode", c.eval.bleu_mode},
        {"bleu_epsilon", c.eval.bleu_epsilon},
        {"meteor", c.eval.meteor},
        {"synonyms_path", c.eval.synonyms_path},
        {"judge_samples", c.eval.judge_samples},
        {"rubric_path", c.eval.rubric_path},
        {"judge", c.eval.judge}}},
      {"serve",
       {{"host", c.serve.host},
        {"port", c.serve.port},
        {"queue_depth", c.serve.queue_depth},
        {"reward", c.serve.reward}}},
  };
}

PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    c.corpus.mesc_path = s.value("mesc_path", c.corpus.mesc_path);
    c.corpus.esconv_path = s.value("esconv_path", c.corpus.esconv_path);
    c.corpus.emotion_map_path = s.value("emotion_map_path", c.corpus.emotion_map_path);
    c.corpus.out_dir = s.value("out_dir", c.corpus.out_dir);
    c.corpus.coverage_threshold = s.value("coverage_threshold", c.corpus.coverage_threshold);
  }
  if (j.contains("encoding")) {
    c.encoding.max_len = j["encoding"].value("max_len", c.encoding.max_len);
    c.encoding.bpe_merges = j["encoding"].value("bpe_merges", c.encoding.bpe_merges);
  }
  if (j.contains("sft")) c.sft = j["sft"].get<SftConfig>();
  if (j.contains("rl")) c.rl = j["rl"].get<PpoConfig>();
  if (j.contains("reward")) c.reward = j["reward"].get<RewardConfig>();
  if (j.contains("generation")) {
    json gen = j["generation"];
    if (gen.contains("grid")) {
      c.grid = gen["grid"].get<GenerationGrid>();
      gen.erase("grid");
    }
    from_json(gen, c.generation);
  }
  if (j.contains("eval")) {
    const auto& s = j["eval"];
    c.eval.bleu_mode = s.value("bleu_mode", c.eval.bleu_mode);
    c.eval.bleu_epsilon = s.value("bleu_epsilon", c.eval.bleu_epsilon);
    c.eval.meteor = s.value("meteor", c.eval.meteor);
    c.eval.synonyms_path = s.value("synonyms_path", c.eval.synonyms_path);
    c.eval.judge_samples = s.value("judge_samples", c.eval.judge_samples);
    c.eval.rubric_path = s.value("rubric_path", c.eval.rubric_path);
    if (s.contains("judge")) c.eval.judge = s["judge"].get<JudgeEndpoint>();
  }
  if (j.contains("serve")) {
    const auto& s = j["serve"];
    c.serve.host = s.value("host", c.serve.host);
    c.serve.port = s.value("port", c.serve.port);
    c.serve.queue_depth = s.value("queue_depth", c.serve.queue_depth);
    c.serve.reward = s.value("reward", c.serve.reward);
  }
  return c;
}

namespace {

/// Every key of `doc` must exist in `schema`, recursively through objects.
void check_keys(const json& doc, const json& schema, const std::string& where) {
  for (const auto& [key, value] : doc.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!schema.contains(key)) throw InvalidArgument("unknown config key '" + path + "'");
    if (value.is_object() && schema[key].is_object()) check_keys(value, schema[key], path);
  }
}

}  // namespace

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw InvalidArgument("override must look like section.key=value: " + std::string(assignment));
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  const json schema = to_json(PipelineConfig{});
  json* node = &doc;
  const json* shape = &schema;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!shape->contains(key)) throw InvalidArgument("unknown config key '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    shape = &(*shape)[key];
    start = dot + 1;
  }
}

PipelineConfig load_pipeline_config(const std::optional<std::filesystem::path>& path,
                                    std::span<const std::string> overrides,
                                    std::optional<std::uint64_t> seed) {
  json doc = json::object();
  if (path) doc = read_json_file(*path);
  if (!doc.is_object()) throw ParseError("config file must hold a JSON object");
  check_keys(doc, to_json(PipelineConfig{}), "");
  for (const auto& o : overrides) apply_override(doc, o);
  PipelineConfig c;
  try {
    c = pipeline_config_from_json(doc);
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid config value: ") + e.what());
  }
  if (seed) c.seed = *seed;
  c.sft.seed = c.seed;
  c.rl.seed = c.seed;
  c.generation.seed = c.seed;
  c.sft.max_len = c.encoding.max_len;
  c.sft.validate();
  c.rl.validate();
  c.reward.weights.validate();
  c.generation.validate();
  c.eval.judge.validate();
  return c;
}

}  // namespace empathrl
