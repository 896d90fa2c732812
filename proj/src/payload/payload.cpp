#include "crossinject/payload.hpp"

#include <algorithm>
#include <random>

namespace crossinject::payload {

namespace {

// Offset where interleaved content goes: after the first line break at or past the middle
// of the body, else at the end.
std::size_t interleave_offset(const std::string& body) {
  const auto nl = body.find('\n', body.size() / 2);
  return nl == std::string::npos ? body.size() : nl + 1;
}

ExternalData splice(const ExternalData& e, std::size_t at, const std::string& inserted, std::size_t payload_offset,
                    std::size_t payload_length) {
  ExternalData out = e;
  out.body.insert(at, inserted);
  out.injected = InjectedSpan{at, inserted.size(), at + payload_offset, payload_length};
  return out;
}

bool starts_with_at(const std::string& s, std::size_t pos, const std::string& prefix) {
  return s.compare(pos, prefix.size(), prefix) == 0;
}

// Longest disruptor matching at pos, so "\n\n" is not read as "\n".
std::optional<std::size_t> match_disruptor(const std::string& s, std::size_t pos,
                                           const std::vector<std::string>& disruptors) {
  std::optional<std::size_t> best;
  for (const auto& w : disruptors) {
    if (!w.empty() && starts_with_at(s, pos, w) && (!best || w.size() > *best)) best = w.size();
  }
  return best;
}

}  // namespace

std::string to_string(Placement p) {
  switch (p) {
    case Placement::kPrepend: return "prepend";
    case Placement::kAppend: return "append";
    case Placement::kInterleave: return "interleave";
  }
  return "append";
}

Placement placement_from_string(const std::string& s) {
  if (s == "prepend") return Placement::kPrepend;
  if (s == "append") return Placement::kAppend;
  if (s == "interleave") return Placement::kInterleave;
  throw ConfigError("unknown placement '" + s + "' (expected prepend, append or interleave)");
}

const std::vector<std::string>& html_tag_allowlist() {
  static const std::vector<std::string> tags = {
      "a",      "article", "aside", "b",      "blockquote", "body",    "code",   "details", "div",
      "em",     "figcaption", "figure", "footer", "h1",      "h2",      "h3",     "h4",      "h5",
      "h6",     "header",  "html",  "i",      "label",      "li",      "main",   "mark",    "nav",
      "noscript", "ol",    "p",     "pre",    "section",    "small",   "span",   "strong",  "summary",
      "table",  "td",      "template", "th",  "tr",         "u",       "ul"};
  return tags;
}

void WebWrapConfig::check() const {
  if (tag_sequence.empty()) throw ConfigError("tag_sequence must be non-empty");
  const auto& allow = html_tag_allowlist();
  for (const auto& t : tag_sequence) {
    if (std::find(allow.begin(), allow.end(), t) == allow.end()) {
      throw ConfigError("tag '" + t + "' is not an allowlisted HTML5 tag");
    }
  }
  if (whitespace_disruptors.empty()) throw ConfigError("whitespace_disruptors must be non-empty");
  for (const auto& w : whitespace_disruptors) {
    if (w.empty() || w.find_first_not_of(" \t\r\n") != std::string::npos) {
      throw ConfigError("whitespace disruptors must be non-empty whitespace strings");
    }
  }
}

ExternalData inject_document(const ExternalData& e, const std::string& d, Placement placement) {
  if (e.kind != Surface::kDocument) throw SurfaceError("inject_document needs document data, got " + to_string(e.kind));
  if (d.empty()) throw ArgumentError("instruction d must be non-empty");
  if (e.body.empty()) return splice(e, 0, d, 0, d.size());
  switch (placement) {
    case Placement::kPrepend: return splice(e, 0, d + "\n", 0, d.size());
    case Placement::kAppend: return splice(e, e.body.size(), "\n" + d, 1, d.size());
    case Placement::kInterleave: {
      const auto at = interleave_offset(e.body);
      if (at == e.body.size()) return splice(e, at, "\n" + d, 1, d.size());
      return splice(e, at, d + "\n", 0, d.size());
    }
  }
  throw ArgumentError("unknown placement");
}

namespace {

struct Wrapped {
  std::string text;
  std::size_t payload_offset = 0;
};

Wrapped wrap(const std::string& d, const WebWrapConfig& cfg) {
  cfg.check();
  std::mt19937_64 rng(cfg.seed);
  const auto& ws = cfg.whitespace_disruptors;
  Wrapped out;
  for (const auto& t : cfg.tag_sequence) out.text += "<" + t + ">" + ws[rng() % ws.size()];
  out.payload_offset = out.text.size();
  out.text += d;
  for (auto it = cfg.tag_sequence.rbegin(); it != cfg.tag_sequence.rend(); ++it) {
    out.text += ws[rng() % ws.size()] + "</" + *it + ">";
  }
  return out;
}

}  // namespace

std::string wrap_webpage_payload(const std::string& d, const WebWrapConfig& cfg) { return wrap(d, cfg).text; }

ExternalData inject_webpage(const ExternalData& e, const std::string& d, const WebWrapConfig& cfg) {
  if (e.kind != Surface::kWebpage) throw SurfaceError("inject_webpage needs webpage data, got " + to_string(e.kind));
  if (d.empty()) throw ArgumentError("instruction d must be non-empty");
  const Wrapped w = wrap(d, cfg);
  std::size_t at = e.body.size();
  if (cfg.placement == Placement::kPrepend) at = 0;
  if (cfg.placement == Placement::kInterleave) at = interleave_offset(e.body);
  return splice(e, at, w.text, w.payload_offset, d.size());
}

std::optional<std::string> extract_payload(const ExternalData& e, const WebWrapConfig& cfg) {
  if (e.injected) {
    const auto& s = *e.injected;
    if (s.payload_offset + s.payload_length > e.body.size()) return std::nullopt;
    return e.body.substr(s.payload_offset, s.payload_length);
  }
  if (e.kind != Surface::kWebpage) return std::nullopt;
  cfg.check();

  const auto& body = e.body;
  auto by_length = cfg.whitespace_disruptors;
  std::stable_sort(by_length.begin(), by_length.end(),
                   [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  const std::string first_open = "<" + cfg.tag_sequence.front() + ">";
  for (auto start = body.find(first_open); start != std::string::npos; start = body.find(first_open, start + 1)) {
    std::size_t pos = start;
    bool ok = true;
    for (const auto& t : cfg.tag_sequence) {
      const std::string open = "<" + t + ">";
      if (!starts_with_at(body, pos, open)) { ok = false; break; }
      pos += open.size();
      const auto w = match_disruptor(body, pos, cfg.whitespace_disruptors);
      if (!w) { ok = false; break; }
      pos += *w;
    }
    if (!ok) continue;
    const std::string inner_close = "</" + cfg.tag_sequence.back() + ">";
    for (auto close = body.find(inner_close, pos); close != std::string::npos;
         close = body.find(inner_close, close + 1)) {
      // The payload ends where a disruptor precedes the innermost close tag.
      for (const auto& w : by_length) {
        if (close < pos + w.size() || body.compare(close - w.size(), w.size(), w) != 0) continue;
        std::size_t q = close + inner_close.size();
        bool tail_ok = true;
        for (auto it = cfg.tag_sequence.rbegin() + 1; it != cfg.tag_sequence.rend(); ++it) {
          const auto ww = match_disruptor(body, q, cfg.whitespace_disruptors);
          const std::string c = "</" + *it + ">";
          if (!ww || !starts_with_at(body, q + *ww, c)) { tail_ok = false; break; }
          q += *ww + c.size();
        }
        if (tail_ok && close - w.size() > pos) return body.substr(pos, close - w.size() - pos);
      }
    }
  }
  return std::nullopt;
}

std::string strip_injection(const ExternalData& e) {
  if (!e.injected) throw ArgumentError("external data carries no recorded injection");
  std::string body = e.body;
  body.erase(e.injected->offset, e.injected->length);
  return body;
}

}  // namespace crossinject::payload
