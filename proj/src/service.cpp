#include "empathrl/service.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "empathrl/error.hpp"

namespace empathrl {

using nlohmann::json;

namespace {

std::string valid_emotions() {
  std::string out;
  for (auto e : kAllEmotions) {
    if (!out.empty()) out += ", ";
    out += to_string(e);
  }
  return out;
}

bool blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

}  // namespace

SuggestionService::SuggestionService(ServiceOptions options) : options_(std::move(options)) {
  if (options_.queue_depth == 0) throw InvalidArgument("serve.queue_depth must be positive");
}

SuggestionService::~SuggestionService() { stop(); }

json SuggestionService::error_body(std::string_view code, std::string_view message) const {
  return json{{"error", code}, {"message", message}};
}

void SuggestionService::set_model(Checkpoint ckpt, std::string model_id, GenerationConfig defaults,
                                  std::shared_ptr<const RewardEngine> engine) {
  defaults.validate();
  std::lock_guard lock(model_mutex_);
  ckpt_.emplace(std::move(ckpt));
  model_id_ = std::move(model_id);
  defaults_ = defaults;
  engine_ = std::move(engine);
  ready_ = true;
  spdlog::info(json{{"event", "model_loaded"}, {"model_id", model_id_}}.dump());
}

std::pair<int, json> SuggestionService::handle_suggest(const std::string& body) {
  if (!ready_) return {503, error_body("loading", "model is still loading")};

  struct Slot {
    std::atomic<std::size_t>& n;
    ~Slot() { --n; }
  };
  if (in_flight_.fetch_add(1) >= options_.queue_depth) {
    --in_flight_;
    return {429, error_body("busy", "request queue is full, retry shortly")};
  }
  Slot slot{in_flight_};

  const json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) return {400, error_body("invalid_json", "body must be a JSON object")};

  std::string problem_type;
  std::string user_text;
  Emotion user_emotion = Emotion::neutral;
  try {
    problem_type = req.value("problem_type", std::string());
    user_text = req.at("user_text").get<std::string>();
  } catch (const json::exception&) {
    return {400, error_body("invalid_request", "user_text must be a string; problem_type a string")};
  }
  if (blank(user_text)) return {400, error_body("empty_text", "user_text must not be empty")};
  const auto emotion_it = req.find("user_emotion");
  if (emotion_it == req.end() || !emotion_it->is_string()) {
    return {400, error_body("invalid_emotion", "user_emotion must be one of: " + valid_emotions())};
  }
  if (auto e = try_parse_emotion(emotion_it->get<std::string>())) {
    user_emotion = *e;
  } else {
    return {400, error_body("invalid_emotion", "'" + emotion_it->get<std::string>() +
                                                   "' is not a valid emotion; expected one of: " +
                                                   valid_emotions())};
  }

  std::lock_guard lock(model_mutex_);
  GenerationConfig cfg = defaults_;
  if (req.contains("overrides") && !req["overrides"].is_null()) {
    try {
      if (!req["overrides"].is_object()) throw InvalidArgument("overrides must be an object");
      from_json(req["overrides"], cfg);
      cfg.validate();
    } catch (const std::exception& e) {
      return {400, error_body("invalid_overrides", e.what())};
    }
  }

  Suggestion s;
  try {
    s = generate(*ckpt_, PromptContext{problem_type, user_text, user_emotion}, cfg);
  } catch (const ContextTooLong& e) {
    return {422, error_body("context_too_long", e.what())};
  }
  if (engine_) {
    try {
      s.reward_breakdown = engine_->score(RewardInput{s.text, s.emotion, s.emotion.has_value(),
                                                      user_emotion, user_text});
    } catch (const ScorerError& e) {
      spdlog::warn("suggest: reward scoring failed: {}", e.what());
    }
  }
  json out{{"suggestion", s}, {"model_id", model_id_}, {"disclaimer", kServiceDisclaimer}};
  if (req.contains("session_id")) out["session_id"] = req["session_id"];
  return {200, out};
}

int SuggestionService::start() {
  server_ = std::make_unique<httplib::Server>();
  started_ = std::chrono::steady_clock::now();

  server_->Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    const double uptime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    if (!ready_) {
      reply(res, 503, json{{"status", "loading"}, {"uptime_s", uptime}});
      return;
    }
    reply(res, 200, json{{"status", "ok"}, {"model_id", model_id_}, {"uptime_s", uptime}});
  });

  server_->Get("/config", [this](const httplib::Request&, httplib::Response& res) {
    if (!ready_) {
      reply(res, 503, error_body("loading", "model is still loading"));
      return;
    }
    std::lock_guard lock(model_mutex_);
    json body{{"model_id", model_id_}, {"generation", defaults_}, {"disclaimer", kServiceDisclaimer}};
    body["reward_weights"] = engine_ ? json(engine_->config().weights) : json(nullptr);
    reply(res, 200, body);
  });

  server_->Post("/suggest", [this](const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    auto [status, body] = handle_suggest(req.body);
    reply(res, status, body);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info(json{{"event", "request"}, {"route", "/suggest"}, {"status", status}, {"latency_ms", ms}}.dump());
  });

  if (options_.port == 0) {
    port_ = server_->bind_to_any_port(options_.host);
  } else {
    port_ = server_->bind_to_port(options_.host, options_.port) ? options_.port : -1;
  }
  if (port_ <= 0) throw IoError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void SuggestionService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace empathrl
