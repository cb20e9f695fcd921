#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include <nlohmann/json.hpp>

#include "empathrl/checkpoint.hpp"
#include "empathrl/inference.hpp"
#include "empathrl/reward.hpp"

namespace httplib {
class Server;
}

namespace empathrl {

/// Returned with every suggestion; not configurable.
inline constexpr std::string_view kServiceDisclaimer =
    "Suggestions are drafts for a qualified clinician to review. They are not a substitute for "
    "professional care and must not be shown to patients without supervision.";

struct ServiceOptions {
  std::string host = "127.0.0.1";
  /// 0 binds an ephemeral port.
  int port = 8080;
  /// Requests allowed in flight (running or waiting for the model) before 429.
  std::size_t queue_depth = 8;
};

/// POST /suggest, GET /health and GET /config over one model. Until a model
/// is installed every route answers 503.
class SuggestionService {
 public:
  explicit SuggestionService(ServiceOptions options);
  ~SuggestionService();
  SuggestionService(const SuggestionService&) = delete;
  SuggestionService& operator=(const SuggestionService&) = delete;

  /// Binds and serves on a background thread. Returns the bound port.
  int start();
  void stop();
  int port() const noexcept { return port_; }

  /// Installs the model. `engine` may be null, in which case suggestions carry
  /// no reward breakdown.
  void set_model(Checkpoint ckpt, std::string model_id, GenerationConfig defaults,
                 std::shared_ptr<const RewardEngine> engine);
  bool ready() const noexcept { return ready_.load(); }

  /// The /suggest handler without HTTP: returns (status, body).
  std::pair<int, nlohmann::json> handle_suggest(const std::string& body);

 private:
  nlohmann::json error_body(std::string_view code, std::string_view message) const;

  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();

  std::atomic<bool> ready_{false};
  std::atomic<std::size_t> in_flight_{0};
  std::mutex model_mutex_;
  std::optional<Checkpoint> ckpt_;
  std::string model_id_;
  GenerationConfig defaults_;
  std::shared_ptr<const RewardEngine> engine_;
};

}  // namespace empathrl
