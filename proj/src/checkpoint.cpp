#include "empathrl/checkpoint.hpp"

#include <fstream>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;
namespace fs = std::filesystem;

#ifndef EMPATHRL_GIT_REVISION
#define EMPATHRL_GIT_REVISION "unknown"
#endif

std::string_view code_revision() noexcept { return EMPATHRL_GIT_REVISION; }

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& value) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << value.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void append_jsonl(const fs::path& path, const json& row) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << row.dump() << '\n';
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  if (ckpt.model.config().vocab_size != ckpt.tokenizer.total_vocab_size()) {
    throw InvalidArgument("model vocabulary does not match the extended tokenizer");
  }
  fs::create_directories(dir);
  ckpt.model.save(dir / kWeightsFile);
  write_json_file(dir / kBaseTokenizerFile, ckpt.tokenizer.base().to_json());
  write_json_file(dir / kTokenizerManifestFile, ckpt.tokenizer.manifest());
  json manifest = ckpt.training_manifest;
  if (!manifest.contains("code_revision")) manifest["code_revision"] = code_revision();
  write_json_file(dir / kTrainingManifestFile, manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
  auto base = base_tokenizer_from_json(read_json_file(dir / kBaseTokenizerFile));
  auto tokenizer = ExtendedTokenizer::extend(base);
  tokenizer.verify_manifest(read_json_file(dir / kTokenizerManifestFile));
  auto model = GptModel::load(dir / kWeightsFile);
  if (model.config().vocab_size != tokenizer.total_vocab_size()) {
    throw ParseError("checkpoint weights have " + std::to_string(model.config().vocab_size) +
                     " embedding rows but the tokenizer has " +
                     std::to_string(tokenizer.total_vocab_size()) + " tokens");
  }
  json manifest = fs::exists(dir / kTrainingManifestFile) ? read_json_file(dir / kTrainingManifestFile)
                                                          : json::object();
  return Checkpoint{std::move(model), std::move(tokenizer), std::move(manifest)};
}

}  // namespace empathrl
