#include "crossinject/backends/remote_chat.hpp"

#include <httplib.h>

#include <json.hpp>
#include <thread>

#include "crossinject/io.hpp"

namespace crossinject::backends {

using nlohmann::ordered_json;

HttpChatBackend::HttpChatBackend(std::string id, ChatRole role, HttpChatOptions options)
    : ChatBackend(std::move(id), role), options_(std::move(options)) {
  if (options_.attempts < 1) throw ArgumentError("HTTP chat backend needs at least one attempt");
}

std::string HttpChatBackend::encode_request(const std::string& model, ChatRole role,
                                            const std::string& system, std::span<const PromptPart> parts,
                                            int max_tokens) {
  ordered_json req;
  req["model"] = model;
  req["role"] = to_string(role);
  req["system"] = system;
  req["max_tokens"] = max_tokens;
  req["parts"] = ordered_json::array();
  for (const auto& p : parts) {
    ordered_json jp;
    jp["label"] = p.label;
    if (p.is_image()) {
      const auto rgb = to_rgb8(*p.image);
      jp["type"] = "image";
      jp["height"] = p.image->height();
      jp["width"] = p.image->width();
      jp["rgb_base64"] = base64_encode(std::string_view(reinterpret_cast<const char*>(rgb.data()), rgb.size()));
    } else {
      jp["type"] = "text";
      jp["text"] = p.text;
    }
    req["parts"].push_back(std::move(jp));
  }
  return req.dump();
}

std::string HttpChatBackend::complete(const std::string& system, std::span<const PromptPart> parts,
                                      int max_tokens) const {
  const std::string body = encode_request(id(), role(), system, parts, max_tokens);
  httplib::Client client(options_.base_url);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  client.set_write_timeout(options_.timeout);

  std::string last_error;
  bool last_was_timeout = false;
  auto backoff = options_.initial_backoff;
  for (int attempt = 0; attempt < options_.attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto res = client.Post(options_.path, body, "application/json");
    if (!res) {
      const auto err = res.error();
      last_was_timeout = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout;
      last_error = httplib::to_string(err);
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_was_timeout = false;
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw BackendError("chat backend '" + id() + "' rejected the request: HTTP " +
                         std::to_string(res->status) + " " + res->body);
    }
    try {
      const auto reply = nlohmann::json::parse(res->body);
      return reply.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("chat backend '" + id() + "' sent a malformed reply: " + e.what());
    }
  }
  const std::string msg = "chat backend '" + id() + "' failed after " + std::to_string(options_.attempts) +
                          " attempts: " + last_error;
  if (last_was_timeout) throw TimeoutError(msg);
  throw BackendError(msg);
}

}  // namespace crossinject::backends
