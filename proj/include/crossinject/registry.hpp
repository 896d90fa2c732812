#pragma once

// Backend registry: named encoders, generators, surrogate LMs and chat backends built from a
// JSON description.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "crossinject/backends/chat.hpp"
#include "crossinject/backends/lm.hpp"
#include "crossinject/backends/t2i.hpp"
#include "crossinject/backends/vision.hpp"

namespace crossinject {

/// Run-time facts the scripted backends need.
struct RegistryContext {
  /// Injected instructions a scripted planner recognizes.
  std::vector<std::string> watched_instructions;
};

class BackendRegistry {
 public:
  /// Throws ConfigError on malformed entries, duplicate ids or dangling references.
  static BackendRegistry from_json_text(const std::string& text, const RegistryContext& ctx);
  static BackendRegistry load(const std::filesystem::path& path, const RegistryContext& ctx);

  void add(backends::EncoderPtr encoder);
  void add(backends::T2IPtr t2i);
  void add(backends::LMPtr lm);
  void add(backends::ChatPtr chat);

  /// Lookups throw ConfigError for unknown ids.
  backends::EncoderPtr encoder(const std::string& id) const;
  backends::T2IPtr t2i(const std::string& id) const;
  backends::LMPtr lm(const std::string& id) const;
  backends::ChatPtr chat(const std::string& id) const;

  std::vector<std::string> encoder_ids() const;
  std::vector<std::string> lm_ids() const;

 private:
  std::map<std::string, backends::EncoderPtr> encoders_;
  std::map<std::string, backends::T2IPtr> t2is_;
  std::map<std::string, backends::LMPtr> lms_;
  std::map<std::string, backends::ChatPtr> chats_;
};

/// Cosine between the encoder's view of `image` and of the generated target for `d`
/// (template reformulation, fixed generator seed).
std::function<double(const ImageTensor&, const std::string&)> make_visual_probe(backends::EncoderPtr encoder,
                                                                              backends::T2IPtr t2i,
                                                                              std::uint64_t seed);

/// Passes when the tail lowers the surrogate NLL of the default target action for d by at
/// least `margin` nats relative to the context without any tail.
std::function<bool(const std::string&, const std::string&, const std::string&)> make_command_gate(
    backends::LMPtr lm, double margin);

}  // namespace crossinject
