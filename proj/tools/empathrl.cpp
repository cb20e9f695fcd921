// Pipeline CLI: preprocess -> init-base -> sft -> rl -> grid/evaluate/judge, plus serve.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "empathrl/checkpoint.hpp"
#include "empathrl/config.hpp"
#include "empathrl/corpus.hpp"
#include "empathrl/encoding.hpp"
#include "empathrl/error.hpp"
#include "empathrl/inference.hpp"
#include "empathrl/judge.hpp"
#include "empathrl/ppo.hpp"
#include "empathrl/report.hpp"
#include "empathrl/scorers.hpp"
#include "empathrl/service.hpp"
#include "empathrl/sft.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace empathrl;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

PipelineConfig resolve(const GlobalOptions& g) {
  std::optional<fs::path> path;
  if (!g.config_path.empty()) path = g.config_path;
  return load_pipeline_config(path, g.overrides, g.seed);
}

fs::path data_dir(const PipelineConfig& cfg, const std::string& flag) {
  return flag.empty() ? fs::path(cfg.corpus.out_dir) : fs::path(flag);
}

std::vector<DialogueExample> read_split(const fs::path& dir, std::string_view split) {
  return read_examples_jsonl(dir / (std::string(split) + ".jsonl"));
}

std::vector<EncodedExample> encode_all(const ExtendedTokenizer& tok, std::span<const DialogueExample> rows,
                                       bool with_emotion, std::size_t max_len, std::size_t* dropped) {
  std::vector<EncodedExample> out;
  for (const auto& ex : rows) {
    try {
      if (auto e = encode_example(tok, ex, with_emotion, max_len)) {
        out.push_back(std::move(*e));
        continue;
      }
    } catch (const ContextTooLong&) {
    }
    if (dropped != nullptr) ++*dropped;
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const PipelineConfig& cfg, const std::string& input, const std::string& out_flag,
                   const std::string& base_ckpt) {
  const fs::path src = input.empty() ? fs::path(cfg.corpus.mesc_path) : fs::path(input);
  if (src.empty()) throw InvalidArgument("no corpus given (corpus.mesc_path or --input)");
  const fs::path out = data_dir(cfg, out_flag);
  fs::create_directories(out);

  const auto dialogues = load_mesc(src);
  std::map<Split, std::vector<DialogueExample>> by_split;
  PreprocessSummary summary;
  std::map<Speaker, std::map<Emotion, std::size_t>> histogram;
  for (const auto& d : dialogues) {
    for (const auto& t : d.turns) ++histogram[t.speaker][t.emotion];
    auto ex = preprocess_dialogue(d, &summary);
    auto& bucket = by_split[d.split];
    bucket.insert(bucket.end(), ex.begin(), ex.end());
  }
  for (auto split : {Split::train, Split::val, Split::test}) {
    write_examples_jsonl(out / (std::string(to_string(split)) + ".jsonl"), by_split[split]);
  }

  json stats{{"dialogues", summary.dialogues},
             {"examples", summary.examples},
             {"dropped_empty_turns", summary.dropped_empty_turns},
             {"dropped_empty_examples", summary.dropped_empty_examples}};
  for (auto split : {Split::train, Split::val, Split::test}) {
    stats["split_sizes"][std::string(to_string(split))] = by_split[split].size();
  }
  const auto& train = by_split[Split::train];
  if (!base_ckpt.empty() && !train.empty()) {
    const auto ckpt = load_checkpoint(base_ckpt);
    auto s = corpus_stats(
        train,
        [&](const DialogueExample& ex) { return training_sequence(ckpt.tokenizer, ex, true).size(); },
        cfg.corpus.coverage_threshold);
    s.emotion_histogram_by_speaker = histogram;
    stats["train_stats"] = to_json(s);
  } else {
    json hist = json::object();
    for (const auto& [speaker, counts] : histogram) {
      for (const auto& [emotion, n] : counts) hist[std::string(to_string(speaker))][std::string(to_string(emotion))] = n;
    }
    stats["emotion_histogram_by_speaker"] = hist;
  }
  write_json_file(out / "stats.json", stats);
  std::cout << stats.dump(2) << '\n';
  return 0;
}

int cmd_init_base(const PipelineConfig& cfg, const std::string& out, const std::string& data_flag,
                  const std::string& gpt2_dir, GptConfig shape) {
  std::shared_ptr<const BaseTokenizer> base;
  std::optional<GptModel> model;
  if (!gpt2_dir.empty()) {
    const fs::path dir(gpt2_dir);
    base = std::make_shared<ByteLevelBpe>(
        ByteLevelBpe::from_gpt2_files(dir / "vocab.json", dir / "merges.txt"));
    model.emplace(GptModel::load_llmc(dir / "gpt2_124M.bin"));
  } else {
    std::vector<std::string> texts;
    for (const auto& ex : read_split(data_dir(cfg, data_flag), "train")) {
      texts.push_back(ex.problem_type);
      texts.push_back(ex.user_text);
      texts.push_back(ex.therapist_text);
    }
    if (texts.empty()) throw InvalidArgument("init-base: training split is empty");
    base = std::make_shared<ByteLevelBpe>(ByteLevelBpe::train(texts, cfg.encoding.bpe_merges));
  }
  auto tok = ExtendedTokenizer::extend(base);
  if (model) {
    model->resize_vocab(tok.total_vocab_size(), cfg.seed);
  } else {
    shape.vocab_size = tok.total_vocab_size();
    model.emplace(shape, cfg.seed);
  }
  Checkpoint ckpt{std::move(*model), std::move(tok), json{{"stage", "base"}, {"seed", cfg.seed}}};
  save_checkpoint(out, ckpt);
  std::cout << json{{"checkpoint", out},
                    {"vocab_size", ckpt.tokenizer.total_vocab_size()},
                    {"parameters", ckpt.model.num_parameters()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_sft(PipelineConfig cfg, const std::string& base_dir, const std::string& out, const std::string& data_flag,
            const std::string& variant) {
  if (!variant.empty()) cfg.sft.variant = parse_sft_variant(variant);
  auto ckpt = load_checkpoint(base_dir);
  const auto dir = data_dir(cfg, data_flag);
  const bool with_emotion = cfg.sft.variant == SftVariant::with_emotion;
  std::size_t dropped = 0;
  const auto train_rows = read_split(dir, "train");
  const auto val_rows = read_split(dir, "val");
  const auto train = encode_all(ckpt.tokenizer, train_rows, with_emotion, cfg.sft.max_len, &dropped);
  const auto val = encode_all(ckpt.tokenizer, val_rows, with_emotion, cfg.sft.max_len, &dropped);
  spdlog::info("sft: {} train, {} val examples ({} filtered by length)", train.size(), val.size(), dropped);
  ckpt.training_manifest["generation"] = cfg.generation;
  const auto result = train_sft(ckpt, train, val, cfg.sft, fs::path(out));
  std::cout << json{{"checkpoint", out},
                    {"variant", to_string(cfg.sft.variant)},
                    {"initial_train_loss", result.initial_train_loss},
                    {"final_train_loss", result.final_train_loss},
                    {"best_epoch", result.best_epoch},
                    {"best_val_loss", result.best_val_loss}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_rl(const PipelineConfig& cfg, const std::string& sft_dir, const std::string& out,
           const std::string& data_flag, bool print_config) {
  if (print_config) {
    std::cout << json{{"rl", cfg.rl}, {"reward", cfg.reward}}.dump(2) << '\n';
    return 0;
  }
  if (sft_dir.empty() || out.empty()) throw InvalidArgument("rl needs --ckpt and --out");
  auto ckpt = load_checkpoint(sft_dir);
  RewardEngine engine(cfg.reward, make_scorer_registry(cfg.reward));
  std::vector<RlPrompt> prompts;
  for (const auto& ex : read_split(data_dir(cfg, data_flag), "train")) prompts.push_back(rl_prompt_of(ex));
  fs::create_directories(out);
  engine.set_audit_log(fs::path(out) / "reward_audit.jsonl");
  PpoTrainer trainer(std::move(ckpt), engine, cfg.rl);
  const auto result = trainer.train(prompts, fs::path(out));
  json curve = json::array();
  for (const auto& e : result.epochs) curve.push_back(json{{"epoch", e.epoch}, {"mean_scaled_reward", e.mean_scaled_reward}, {"mean_kl", e.mean_kl}});
  std::cout << json{{"checkpoint", out}, {"epochs", curve}, {"max_batch_kl", result.max_batch_kl}}.dump() << '\n';
  return result.kl_ceiling_breached ? 1 : 0;
}

GenerationConfig generation_for(const PipelineConfig& cfg, const Checkpoint& ckpt, bool from_ckpt) {
  GenerationConfig g = from_ckpt ? default_generation_config(ckpt) : cfg.generation;
  g.seed = cfg.seed;
  return g;
}

int cmd_generate(const PipelineConfig& cfg, const std::string& ckpt_dir, const std::string& problem,
                 const std::string& text, const std::string& emotion, bool greedy) {
  const auto ckpt = load_checkpoint(ckpt_dir);
  auto g = generation_for(cfg, ckpt, false);
  g.greedy = g.greedy || greedy;
  const auto s = generate(ckpt, PromptContext{problem, text, parse_emotion(emotion)}, g);
  std::cout << json(s).dump(2) << '\n';
  return 0;
}

int cmd_grid(const PipelineConfig& cfg, const std::string& ckpt_dir, const std::string& data_flag,
             std::size_t limit, const std::string& csv_path, bool write_back) {
  auto ckpt = load_checkpoint(ckpt_dir);
  auto val = read_split(data_dir(cfg, data_flag), "val");
  if (limit > 0 && val.size() > limit) val.resize(limit);
  if (cfg.grid.size() == 0) throw InvalidArgument("generation.grid is empty");
  auto options = cfg.eval.metric_options();
  options.with_meteor = false;
  const auto result = grid_search(ckpt, val, cfg.grid, generation_for(cfg, ckpt, false), options);
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot write " + csv_path);
    f << grid_csv(result);
  }
  if (write_back) {
    ckpt.training_manifest["generation"] = result.best;
    ckpt.training_manifest["grid_search"] = result;
    save_checkpoint(ckpt_dir, ckpt);
  }
  std::cout << json{{"best", result.best}, {"cells", result.table.size()}}.dump() << '\n';
  return 0;
}

std::vector<EvalOutput> evaluate_checkpoint(const PipelineConfig& cfg, const std::string& ckpt_dir, DatasetId dataset,
                                            const std::string& data_flag, std::size_t limit);

int cmd_evaluate(const PipelineConfig& cfg, const std::string& ckpt_dir, const std::string& dataset_flag,
                 const std::string& data_flag, const std::string& out, std::string model_id, std::size_t limit,
                 const std::string& outputs_path) {
  const auto dataset = parse_dataset_id(dataset_flag);
  MetricOptions options = cfg.eval.metric_options();
  std::optional<SynonymTable> synonyms;
  if (!cfg.eval.synonyms_path.empty()) {
    synonyms = SynonymTable::from_json(read_json_file(cfg.eval.synonyms_path));
    options.synonyms = &*synonyms;
  }

  std::vector<EvalOutput> outputs;
  if (!outputs_path.empty()) {
    // Rescore saved outputs; no model involved.
    outputs = read_outputs_jsonl(outputs_path);
    if (limit > 0 && outputs.size() > limit) outputs.resize(limit);
    if (outputs.empty()) throw InvalidArgument("no outputs in " + outputs_path);
    if (model_id.empty()) model_id = fs::path(outputs_path).stem().string();
  } else {
    if (ckpt_dir.empty()) throw InvalidArgument("evaluate needs --ckpt or --outputs");
    outputs = evaluate_checkpoint(cfg, ckpt_dir, dataset, data_flag, limit);
    if (model_id.empty()) model_id = fs::path(ckpt_dir).filename().string();
  }
  const auto report = build_report(model_id, dataset, outputs, options);

  fs::create_directories(out);
  {
    std::ofstream f(fs::path(out) / "outputs.jsonl");
    for (const auto& o : outputs) f << json(o).dump() << '\n';
  }
  const std::vector<EvalReport> reports{report};
  write_reports(out, reports);
  std::cout << json(report).dump(2) << '\n';
  return 0;
}

std::vector<EvalOutput> evaluate_checkpoint(const PipelineConfig& cfg, const std::string& ckpt_dir, DatasetId dataset,
                                            const std::string& data_flag, std::size_t limit) {
  const auto ckpt = load_checkpoint(ckpt_dir);
  std::vector<DialogueExample> examples;
  if (dataset == DatasetId::mesc_test) {
    examples = read_split(data_dir(cfg, data_flag), "test");
  } else {
    const fs::path src = data_flag.empty() ? fs::path(cfg.corpus.esconv_path) : fs::path(data_flag);
    if (src.empty()) throw InvalidArgument("no ESConv corpus given (corpus.esconv_path or --data)");
    const auto mapper = cfg.corpus.emotion_map_path.empty() ? EmotionMapper::go_emotions_default()
                                                            : EmotionMapper::load(cfg.corpus.emotion_map_path);
    const auto classifier = make_emotion_classifier(cfg.reward);
    const auto conversations = load_esconv(src);
    examples = esconv_examples(conversations, *classifier, mapper);
  }
  if (limit > 0 && examples.size() > limit) examples.resize(limit);
  if (examples.empty()) throw InvalidArgument("evaluation set is empty");
  return generate_outputs(ckpt, examples, generation_for(cfg, ckpt, true));
}

int cmd_judge(const PipelineConfig& cfg, const std::string& run_dir, std::size_t limit) {
  const fs::path dir(run_dir);
  std::vector<JudgeSample> samples;
  {
    std::ifstream in(dir / "outputs.jsonl");
    if (!in) throw IoError("cannot open " + (dir / "outputs.jsonl").string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto row = json::parse(line);
      samples.push_back(JudgeSample{row.at("context").get<std::string>(), row.at("candidate").get<std::string>()});
    }
  }
  const std::size_t n = limit > 0 ? limit : cfg.eval.judge_samples;
  if (samples.size() > n) samples.resize(n);
  const auto rubric = load_rubric(cfg.eval.rubric_path);
  HttpChatClient client(cfg.eval.judge);
  auto score = judge(samples, client, rubric, cfg.eval.judge);

  std::vector<EvalReport> reports;
  if (fs::exists(dir / "eval_report.json")) {
    reports = read_json_file(dir / "eval_report.json").get<std::vector<EvalReport>>();
  }
  if (reports.empty()) {
    write_judge_raw(dir / "judge_raw.jsonl", score);
  } else {
    reports.front().judge = score;
    write_reports(dir, reports);
  }
  std::cout << json(score).dump(2) << '\n';
  return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const PipelineConfig& cfg, const std::string& ckpt_dir, std::string model_id) {
  SuggestionService service(ServiceOptions{cfg.serve.host, cfg.serve.port, cfg.serve.queue_depth});
  const int port = service.start();
  spdlog::info(json{{"event", "listening"}, {"host", cfg.serve.host}, {"port", port}}.dump());
  auto ckpt = load_checkpoint(ckpt_dir);
  std::shared_ptr<const RewardEngine> engine;
  if (cfg.serve.reward) engine = std::make_shared<RewardEngine>(cfg.reward, make_scorer_registry(cfg.reward));
  if (model_id.empty()) model_id = fs::path(ckpt_dir).filename().string();
  auto defaults = default_generation_config(ckpt);
  defaults.seed = cfg.seed;
  service.set_model(std::move(ckpt), model_id, defaults, engine);
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  service.stop();
  return 0;
}

int cmd_config(const PipelineConfig& cfg) {
  std::cout << to_json(cfg).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"empathrl: therapeutic dialogue fine-tuning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("-c,--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config value, e.g. --set sft.learning_rate=1e-4")
      ->allow_extra_args(false);
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every stochastic step");
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error");

  std::string input, out, data, base, ckpt, variant, gpt2_dir, model_id, dataset = "mesc-test";
  std::string problem, user_text, user_emotion = "neutral", csv, outputs_path;
  bool greedy = false, print_config = false, write_back = false;
  std::size_t limit = 0;
  GptConfig shape{.vocab_size = 0, .context_window = 128, .n_layer = 2, .n_head = 2, .d_model = 64, .init_std = 0.02};

  auto* preprocess = app.add_subcommand("preprocess", "Corpus to train/val/test examples and stats");
  preprocess->add_option("--input", input, "MESC-style corpus JSON");
  preprocess->add_option("--out", out, "Output directory (default corpus.out_dir)");
  preprocess->add_option("--base", base, "Checkpoint whose tokenizer measures lengths");

  auto* init_base = app.add_subcommand("init-base", "Create the base checkpoint");
  init_base->add_option("--out", out, "Checkpoint directory")->required();
  init_base->add_option("--data", data, "Preprocessed data directory");
  init_base->add_option("--gpt2-dir", gpt2_dir, "Directory with vocab.json, merges.txt, gpt2_124M.bin");
  init_base->add_option("--layers", shape.n_layer, "Layers of a fresh model");
  init_base->add_option("--heads", shape.n_head, "Attention heads of a fresh model");
  init_base->add_option("--d-model", shape.d_model, "Width of a fresh model");
  init_base->add_option("--context", shape.context_window, "Context window of a fresh model");

  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning");
  sft->add_option("--base", base, "Base checkpoint")->required();
  sft->add_option("--out", out, "Output checkpoint directory")->required();
  sft->add_option("--data", data, "Preprocessed data directory");
  sft->add_option("--variant", variant, "with-emotion|no-emotion")
      ->check(CLI::IsMember({"with-emotion", "no-emotion", "with_emotion", "no_emotion"}));

  auto* rl = app.add_subcommand("rl", "PPO against the composite reward");
  rl->add_option("--ckpt", ckpt, "SFT checkpoint");
  rl->add_option("--out", out, "Output checkpoint directory");
  rl->add_option("--data", data, "Preprocessed data directory");
  rl->add_flag("--print-config", print_config, "Print the effective RL and reward config and exit");

  auto* gen = app.add_subcommand("generate", "One suggestion");
  gen->add_option("--ckpt", ckpt, "Checkpoint")->required();
  gen->add_option("--problem", problem, "Problem type");
  gen->add_option("--user-text", user_text, "Patient utterance")->required();
  gen->add_option("--user-emotion", user_emotion, "Patient emotion");
  gen->add_flag("--greedy", greedy, "Greedy decoding");

  auto* grid = app.add_subcommand("grid", "Sampling grid search on the validation split");
  grid->add_option("--ckpt", ckpt, "Checkpoint")->required();
  grid->add_option("--data", data, "Preprocessed data directory");
  grid->add_option("--limit", limit, "Use at most this many validation examples");
  grid->add_option("--csv", csv, "Write the full table as CSV");
  grid->add_flag("--write-back", write_back, "Store the winning config in the checkpoint manifest");

  auto* evaluate = app.add_subcommand("evaluate", "Lexical metrics and emotion accuracy");
  evaluate->add_option("--ckpt", ckpt, "Checkpoint");
  evaluate->add_option("--outputs", outputs_path, "Score an existing outputs.jsonl instead of generating");
  evaluate->add_option("--dataset", dataset, "mesc-test|esconv")
      ->check(CLI::IsMember({"mesc-test", "mesc_test", "esconv"}));
  evaluate->add_option("--data", data, "Data directory (mesc-test) or ESConv JSON (esconv)");
  evaluate->add_option("--out", out, "Report directory")->required();
  evaluate->add_option("--model-id", model_id, "Name used in reports");
  evaluate->add_option("--limit", limit, "Evaluate at most this many examples");

  auto* judge_cmd = app.add_subcommand("judge", "Rubric scoring by an external chat model");
  judge_cmd->add_option("--run", out, "Directory written by evaluate")->required();
  judge_cmd->add_option("--limit", limit, "Judge at most this many samples (default eval.judge_samples)");

  auto* serve = app.add_subcommand("serve", "HTTP suggestion service");
  serve->add_option("--ckpt", ckpt, "Checkpoint")->required();
  serve->add_option("--model-id", model_id, "Reported model id");

  auto* config = app.add_subcommand("config", "Print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_default_logger(spdlog::stderr_color_mt("empathrl"));
  if (*seed_opt) g.seed = seed;

  try {
    const auto cfg = resolve(g);
    if (*preprocess) return cmd_preprocess(cfg, input, out, base);
    if (*init_base) return cmd_init_base(cfg, out, data, gpt2_dir, shape);
    if (*sft) return cmd_sft(cfg, base, out, data, variant);
    if (*rl) return cmd_rl(cfg, ckpt, out, data, print_config);
    if (*gen) return cmd_generate(cfg, ckpt, problem, user_text, user_emotion, greedy);
    if (*grid) return cmd_grid(cfg, ckpt, data, limit, csv, write_back);
    if (*evaluate) return cmd_evaluate(cfg, ckpt, dataset, data, out, model_id, limit, outputs_path);
    if (*judge_cmd) return cmd_judge(cfg, out, limit);
    if (*serve) return cmd_serve(cfg, ckpt, model_id);
    if (*config) return cmd_config(cfg);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 2;
}
