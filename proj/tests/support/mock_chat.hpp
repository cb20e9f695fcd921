#pragma once

// Local chat-completion endpoint for judge tests.

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace toy {

/// Serves POST /v1/chat/completions. `reply` maps (user message, attempt
/// number for that message) to the assistant content, or to an HTTP status
/// when it returns a string starting with "HTTP ".
class MockChatServer {
 public:
  using ReplyFn = std::function<std::string(const std::string& user, int attempt)>;

  explicit MockChatServer(ReplyFn reply) : reply_(std::move(reply)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      const std::string user = body.at("messages").at(1).at("content").get<std::string>();
      int attempt = 0;
      {
        std::lock_guard lock(mutex_);
        attempt = attempts_[user]++;
      }
      ++requests_;
      const std::string content = reply_(user, attempt);
      if (content.rfind("HTTP ", 0) == 0) {
        res.status = std::stoi(content.substr(5));
        res.set_content("{}", "application/json");
        return;
      }
      nlohmann::json out{{"choices", nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
      res.set_content(out.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockChatServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int requests() const { return requests_.load(); }

 private:
  ReplyFn reply_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  std::map<std::string, int> attempts_;
  std::atomic<int> requests_{0};
};

inline std::string scores_json(int a, int b, int c, int d, int e, int f) {
  return nlohmann::json{{"therapeutic_rapport", a},   {"active_understanding", b},
                        {"relevance_focus", c},       {"practical_helpfulness", d},
                        {"professional_appropriateness", e}, {"emotional_validation", f}}
      .dump();
}

}  // namespace toy
