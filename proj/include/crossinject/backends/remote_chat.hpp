#pragma once

#include <chrono>
#include <string>

#include "crossinject/backends/chat.hpp"

namespace crossinject::backends {

struct HttpChatOptions {
  std::string base_url = "http://127.0.0.1:8080";
  std::string path = "/v1/complete";
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::milliseconds timeout{30000};
};

/// Chat backend speaking a minimal JSON contract:
///
///   POST {path}
///   {"model": id, "role": "planner", "system": "...", "max_tokens": 1024,
///    "parts": [{"label": "image", "type": "image", "height": H, "width": W,
///               "rgb_base64": "..."},
///              {"label": "external", "type": "text", "text": "..."}, ...]}
///   -> 200 {"text": "..."}
///
/// Connection failures, timeouts, 429 and 5xx responses are retried with exponential
/// backoff; other statuses fail immediately.
class HttpChatBackend final : public ChatBackend {
 public:
  HttpChatBackend(std::string id, ChatRole role, HttpChatOptions options);
  std::string complete(const std::string& system, std::span<const PromptPart> parts,
                       int max_tokens) const override;

  static std::string encode_request(const std::string& model, ChatRole role, const std::string& system,
                                    std::span<const PromptPart> parts, int max_tokens);

 private:
  HttpChatOptions options_;
};

}  // namespace crossinject::backends
