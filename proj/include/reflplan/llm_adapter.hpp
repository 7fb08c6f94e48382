#pragma once
//
// Chat-completion client for LLM-backed actors and critics.
//
// Wire format: HTTP POST {base}/chat/completions with body
//   {"model": ..., "messages": [{"role": ..., "content": ...}], "temperature": T, "n": N}
// and a Bearer key read from the environment variable named in LlmConfig.
// Completions are read from choices[k].message.content (or choices[k].text).
// Every exchange is kept in a transcript so an episode can be replayed.
//

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <optional>
#include <regex>
#include <semaphore>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "error.hpp"

namespace reflplan {

struct LlmConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8000/v1
  std::string model = "local-model";
  std::string api_key_env = "REFLPLAN_LLM_KEY";
  int timeout_ms = 30000;
  int max_retries = 2;
  int max_inflight = 4;
};

inline void to_json(nlohmann::json& j, const LlmConfig& c) {
  j = {{"endpoint", c.endpoint},     {"model", c.model},           {"api_key_env", c.api_key_env},
       {"timeout_ms", c.timeout_ms}, {"max_retries", c.max_retries}, {"max_inflight", c.max_inflight}};
}

inline void from_json(const nlohmann::json& j, LlmConfig& c) {
  const LlmConfig d;
  c.endpoint = j.value("endpoint", d.endpoint);
  c.model = j.value("model", d.model);
  c.api_key_env = j.value("api_key_env", d.api_key_env);
  c.timeout_ms = j.value("timeout_ms", d.timeout_ms);
  c.max_retries = j.value("max_retries", d.max_retries);
  c.max_inflight = j.value("max_inflight", d.max_inflight);
}

struct ChatMessage {
  std::string role;
  std::string content;
};

struct LlmExchange {
  std::string request;
  std::string response;
  int status = 0;
};

struct ParsedScore {
  double score = 50.0;
  bool parsed = false;
};

// Reads the last `SCORE: <number>` line, clamped to [0, 100]; 50 when absent.
inline ParsedScore parse_score(const std::string& completion) {
  static const std::regex re(R"(SCORE:\s*(-?[0-9]+(?:\.[0-9]+)?))", std::regex::icase);
  ParsedScore out;
  for (auto it = std::sregex_iterator(completion.begin(), completion.end(), re); it != std::sregex_iterator(); ++it) {
    out.score = std::clamp(std::stod((*it)[1].str()), 0.0, 100.0);
    out.parsed = true;
  }
  return out;
}

// Reads `TEMPLATE: <name>` from an actor completion.
inline std::optional<std::string> parse_template_name(const std::string& completion) {
  static const std::regex re(R"(TEMPLATE:\s*([A-Za-z_\-]+))");
  std::optional<std::string> out;
  for (auto it = std::sregex_iterator(completion.begin(), completion.end(), re); it != std::sregex_iterator(); ++it)
    out = (*it)[1].str();
  return out;
}

class LlmClient {
 public:
  explicit LlmClient(LlmConfig config)
      : config_(std::move(config)), inflight_(std::max(1, std::min(config_.max_inflight, 64))) {
    if (config_.endpoint.empty()) throw Error(ErrorCode::AdapterUnavailable, "no LLM endpoint configured");
    static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.endpoint, m, url))
      throw Error(ErrorCode::AdapterUnavailable, "malformed endpoint '" + config_.endpoint + "'");
    host_ = m[1].str();
    prefix_ = m[2].matched ? m[2].str() : std::string{};
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  const LlmConfig& config() const { return config_; }

  std::vector<std::string> complete(const std::vector<ChatMessage>& messages, double temperature, int n) {
    nlohmann::json body;
    body["model"] = config_.model;
    body["temperature"] = temperature;
    body["n"] = n;
    body["messages"] = nlohmann::json::array();
    for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    const std::string payload = body.dump();

    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);

    inflight_.acquire();
    struct Release {
      std::counting_semaphore<64>& s;
      ~Release() { s.release(); }
    } release{inflight_};

    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      httplib::Client client(host_);
      const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      auto res = client.Post(prefix_ + "/chat/completions", headers, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        record({payload, "", 0});
        continue;
      }
      record({payload, res->body, res->status});
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw Error(ErrorCode::AdapterUnavailable, "HTTP " + std::to_string(res->status));
      try {
        const auto reply = nlohmann::json::parse(res->body);
        std::vector<std::string> out;
        for (const auto& choice : reply.at("choices")) {
          if (choice.contains("message"))
            out.push_back(choice.at("message").at("content").get<std::string>());
          else
            out.push_back(choice.at("text").get<std::string>());
        }
        if (out.empty()) throw Error(ErrorCode::AdapterUnavailable, "response has no choices");
        return out;
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::AdapterUnavailable, std::string("malformed response: ") + e.what());
      }
    }
    throw Error(ErrorCode::AdapterUnavailable, "giving up after retries: " + last_error);
  }

  // Score from a critic completion; logs a warning and falls back to 50 on parse failure.
  double complete_score(const std::vector<ChatMessage>& messages, std::string* feedback = nullptr) {
    const auto text = complete(messages, 0.0, 1).front();
    const auto parsed = parse_score(text);
    if (!parsed.parsed) std::cerr << "warning: critic completion has no SCORE line, using 50\n";
    if (feedback) *feedback = text;
    return parsed.score;
  }

  std::vector<LlmExchange> transcript() const {
    std::lock_guard lock(mutex_);
    return transcript_;
  }

  std::vector<LlmExchange> take_transcript() {
    std::lock_guard lock(mutex_);
    return std::exchange(transcript_, {});
  }

 private:
  void record(LlmExchange ex) {
    std::lock_guard lock(mutex_);
    transcript_.push_back(std::move(ex));
  }

  LlmConfig config_;
  std::string host_;
  std::string prefix_;
  std::counting_semaphore<64> inflight_;
  mutable std::mutex mutex_;
  std::vector<LlmExchange> transcript_;
};

}  // namespace reflplan
