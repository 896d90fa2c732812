#pragma once

// Implanting the injected instruction into external data: local documents (uploaded by the
// user) and webpages (retrieved by the agent).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crossinject/core.hpp"

namespace crossinject::payload {

enum class Placement { kPrepend, kAppend, kInterleave };

std::string to_string(Placement p);
Placement placement_from_string(const std::string& s);

/// Tag names accepted in WebWrapConfig::tag_sequence.
const std::vector<std::string>& html_tag_allowlist();

struct WebWrapConfig {
  std::vector<std::string> tag_sequence = {"html", "body", "p"};
  std::vector<std::string> whitespace_disruptors = {"\n", "\n\n", "\t"};
  Placement placement = Placement::kAppend;
  std::uint64_t seed = 0;

  /// Throws ConfigError on an empty or non-allowlisted tag sequence or empty disruptor list.
  void check() const;
  bool operator==(const WebWrapConfig&) const = default;
};

/// body + "\n" + d by default; an empty body yields d alone.
ExternalData inject_document(const ExternalData& e, const std::string& d, Placement placement = Placement::kAppend);

/// <t1>w<t2>w...<tn>w d w</tn>w...</t1> with seeded whitespace disruptors w, placed per cfg.
ExternalData inject_webpage(const ExternalData& e, const std::string& d, const WebWrapConfig& cfg = {});

/// Only the wrapped fragment, without a host page.
std::string wrap_webpage_payload(const std::string& d, const WebWrapConfig& cfg);

/// Recovers d from the recorded span, or, for webpages without one, by scanning for the
/// wrapping signature of `cfg`'s tags and disruptors.
std::optional<std::string> extract_payload(const ExternalData& e, const WebWrapConfig& cfg = {});

/// The host body with the injected span removed. Throws ArgumentError when no span is recorded.
std::string strip_injection(const ExternalData& e);

}  // namespace crossinject::payload
