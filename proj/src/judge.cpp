#include "empathrl/judge.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace empathrl {

using nlohmann::json;

void JudgeEndpoint::validate() const {
  if (base_url.empty()) throw InvalidArgument("judge.base_url is empty");
  if (model.empty()) throw InvalidArgument("judge.model is empty");
  if (!(timeout_s > 0.0)) throw InvalidArgument("judge.timeout_s must be positive");
  if (!(retry_backoff_s >= 0.0)) throw InvalidArgument("judge.retry_backoff_s must be non-negative");
  if (concurrency == 0) throw InvalidArgument("judge.concurrency must be positive");
}

void to_json(json& j, const JudgeEndpoint& e) {
  j = json{{"base_url", e.base_url},     {"model", e.model},         {"api_key_env", e.api_key_env},
           {"max_retries", e.max_retries}, {"timeout_s", e.timeout_s}, {"retry_backoff_s", e.retry_backoff_s},
           {"concurrency", e.concurrency}, {"temperature", e.temperature}};
}

void from_json(const json& j, JudgeEndpoint& e) {
  JudgeEndpoint d;
  e.base_url = j.value("base_url", d.base_url);
  e.model = j.value("model", d.model);
  e.api_key_env = j.value("api_key_env", d.api_key_env);
  e.max_retries = j.value("max_retries", d.max_retries);
  e.timeout_s = j.value("timeout_s", d.timeout_s);
  e.retry_backoff_s = j.value("retry_backoff_s", d.retry_backoff_s);
  e.concurrency = j.value("concurrency", d.concurrency);
  e.temperature = j.value("temperature", d.temperature);
}

HttpChatClient::HttpChatClient(JudgeEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  endpoint_.validate();
  if (const char* key = std::getenv(endpoint_.api_key_env.c_str())) api_key_ = key;
}

namespace {

/// Splits "https://host:port/prefix" into the scheme-host part and the path prefix.
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_start), prefix};
}

}  // namespace

ChatReply HttpChatClient::post(const json& request) const {
  const auto [host, prefix] = split_url(endpoint_.base_url);
  httplib::Client client(host);
  const auto sec = static_cast<time_t>(endpoint_.timeout_s);
  const auto usec = static_cast<time_t>((endpoint_.timeout_s - static_cast<double>(sec)) * 1e6);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = client.Post(prefix + "/chat/completions", headers, request.dump(), "application/json");
  if (!res) return ChatReply{0, httplib::to_string(res.error())};
  return ChatReply{res->status, res->body};
}

std::optional<CriterionScores> parse_judge_scores(std::string_view content) {
  const auto open = content.find('{');
  const auto close = content.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return std::nullopt;
  const json obj = json::parse(content.substr(open, close - open + 1), nullptr, false);
  if (obj.is_discarded() || !obj.is_object()) return std::nullopt;
  CriterionScores scores{};
  for (std::size_t c = 0; c < kJudgeCriteria; ++c) {
    const auto it = obj.find(std::string(kJudgeCriterionNames[c]));
    if (it == obj.end() || !it->is_number_integer()) return std::nullopt;
    const auto v = it->get<long long>();
    if (v < 1 || v > 5) return std::nullopt;
    scores[c] = static_cast<int>(v);
  }
  return scores;
}

void to_json(json& j, const JudgeRecord& r) {
  j = json{{"index", r.index},
           {"context", r.context},
           {"response", r.response},
           {"attempts", r.attempts},
           {"raw_replies", r.raw_replies},
           {"valid", r.scores.has_value()}};
  if (r.scores) {
    json s = json::object();
    for (std::size_t c = 0; c < kJudgeCriteria; ++c) s[std::string(kJudgeCriterionNames[c])] = (*r.scores)[c];
    j["scores"] = s;
  } else {
    j["scores"] = nullptr;
  }
}

double JudgeScore::mean(std::string_view criterion) const {
  for (std::size_t c = 0; c < kJudgeCriteria; ++c) {
    if (kJudgeCriterionNames[c] == criterion) return means[c];
  }
  throw InvalidArgument("unknown judge criterion: " + std::string(criterion));
}

void to_json(json& j, const JudgeScore& s) {
  json means = json::object();
  for (std::size_t c = 0; c < kJudgeCriteria; ++c) means[std::string(kJudgeCriterionNames[c])] = s.means[c];
  j = json{{"means", means},
           {"n_samples", s.n_samples},
           {"n_valid", s.n_valid},
           {"n_invalid", s.n_invalid},
           {"n_retries", s.n_retries}};
}

std::string load_rubric(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open judge rubric " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

json build_request(const JudgeSample& sample, std::string_view rubric, const JudgeEndpoint& endpoint) {
  std::string user = "Conversation context:\n" + sample.context + "\n\nSupporter response:\n" + sample.response;
  return json{{"model", endpoint.model},
              {"temperature", endpoint.temperature},
              {"messages", json::array({json{{"role", "system"}, {"content", rubric}},
                                        json{{"role", "user"}, {"content", user}}})}};
}

/// choices[0].message.content, or nullopt when the body is not a completion.
std::optional<std::string> reply_content(const std::string& body) {
  const json doc = json::parse(body, nullptr, false);
  if (doc.is_discarded()) return std::nullopt;
  try {
    return doc.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

JudgeRecord judge_one(std::size_t index, const JudgeSample& sample, const ChatClient& client,
                      std::string_view rubric, const JudgeEndpoint& endpoint) {
  JudgeRecord rec;
  rec.index = index;
  rec.context = sample.context;
  rec.response = sample.response;
  const json request = build_request(sample, rubric, endpoint);
  bool last_was_transport = false;
  std::string last_error;
  double backoff = endpoint.retry_backoff_s;
  for (std::size_t attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (last_was_transport && backoff > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
    ++rec.attempts;
    const ChatReply reply = client.post(request);
    rec.raw_replies.push_back(reply.body);
    if (reply.status == 401 || reply.status == 403) {
      throw JudgeError("judge endpoint rejected credentials (HTTP " + std::to_string(reply.status) + ")");
    }
    if (reply.status == 0 || reply.status == 429 || reply.status >= 500) {
      last_was_transport = true;
      last_error = reply.status == 0 ? reply.body : "HTTP " + std::to_string(reply.status);
      continue;
    }
    last_was_transport = false;
    if (reply.status != 200) {
      last_error = "HTTP " + std::to_string(reply.status);
      continue;
    }
    if (auto content = reply_content(reply.body)) {
      if (auto scores = parse_judge_scores(*content)) {
        rec.scores = scores;
        return rec;
      }
    }
    last_error = "malformed reply";
  }
  if (last_was_transport) {
    throw JudgeError("judge request " + std::to_string(index) + " failed after " +
                     std::to_string(rec.attempts) + " attempts: " + last_error);
  }
  spdlog::warn("judge: sample {} invalid after {} attempts ({})", index, rec.attempts, last_error);
  return rec;
}

}  // namespace

JudgeScore judge(std::span<const JudgeSample> samples, const ChatClient& client, std::string_view rubric,
                 const JudgeEndpoint& endpoint) {
  endpoint.validate();
  JudgeScore out;
  out.n_samples = samples.size();
  out.records.resize(samples.size());

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      {
        std::lock_guard lock(error_mutex);
        if (first_error) return;
      }
      try {
        out.records[i] = judge_one(i, samples[i], client, rubric, endpoint);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  const std::size_t n_workers = std::min(endpoint.concurrency, std::max<std::size_t>(samples.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);

  std::array<long long, kJudgeCriteria> sums{};
  for (const auto& rec : out.records) {
    out.n_retries += rec.attempts - 1;
    if (!rec.scores) {
      ++out.n_invalid;
      continue;
    }
    ++out.n_valid;
    for (std::size_t c = 0; c < kJudgeCriteria; ++c) sums[c] += (*rec.scores)[c];
  }
  if (out.n_valid > 0) {
    for (std::size_t c = 0; c < kJudgeCriteria; ++c) {
      out.means[c] = static_cast<double>(sums[c]) / static_cast<double>(out.n_valid);
    }
  }
  return out;
}

void write_judge_raw(const std::filesystem::path& path, const JudgeScore& score) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& rec : score.records) out << json(rec).dump() << '\n';
}

}  // namespace empathrl
