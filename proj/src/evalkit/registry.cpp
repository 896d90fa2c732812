#include "crossinject/registry.hpp"

#include <json.hpp>

#include <mutex>
#include <set>

#include "crossinject/backends/remote_chat.hpp"
#include "crossinject/io.hpp"
#include "crossinject/visual_align.hpp"

namespace crossinject {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + " is missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? get<T>(j, key, where) : fallback;
}

ImageSize get_size(const json& j, const std::string& where) {
  const auto v = get<std::vector<int>>(j, "image_size", where);
  if (v.size() != 2 || v[0] < 1 || v[1] < 1) throw ConfigError(where + ".image_size must be [height, width]");
  return {v[0], v[1]};
}

template <typename Map>
void insert_unique(Map& m, const std::string& id, typename Map::mapped_type value, const char* kind) {
  if (id.empty()) throw ConfigError(std::string(kind) + " id must be non-empty");
  if (!m.emplace(id, std::move(value)).second) throw ConfigError(std::string("duplicate ") + kind + " id '" + id + "'");
}

template <typename Map>
typename Map::mapped_type find_or_throw(const Map& m, const std::string& id, const char* kind) {
  const auto it = m.find(id);
  if (it == m.end()) throw ConfigError(std::string("unknown ") + kind + " backend '" + id + "'");
  return it->second;
}

template <typename Map>
std::vector<std::string> keys(const Map& m) {
  std::vector<std::string> out;
  for (const auto& [k, _] : m) out.push_back(k);
  return out;
}

}  // namespace

void BackendRegistry::add(backends::EncoderPtr encoder) { insert_unique(encoders_, encoder->id(), encoder, "encoder"); }
void BackendRegistry::add(backends::T2IPtr t2i) { insert_unique(t2is_, t2i->id(), t2i, "t2i"); }
void BackendRegistry::add(backends::LMPtr lm) { insert_unique(lms_, lm->id(), lm, "lm"); }
void BackendRegistry::add(backends::ChatPtr chat) { insert_unique(chats_, chat->id(), chat, "chat"); }

backends::EncoderPtr BackendRegistry::encoder(const std::string& id) const {
  return find_or_throw(encoders_, id, "encoder");
}
backends::T2IPtr BackendRegistry::t2i(const std::string& id) const { return find_or_throw(t2is_, id, "t2i"); }
backends::LMPtr BackendRegistry::lm(const std::string& id) const { return find_or_throw(lms_, id, "lm"); }
backends::ChatPtr BackendRegistry::chat(const std::string& id) const { return find_or_throw(chats_, id, "chat"); }

std::vector<std::string> BackendRegistry::encoder_ids() const { return keys(encoders_); }
std::vector<std::string> BackendRegistry::lm_ids() const { return keys(lms_); }

BackendRegistry BackendRegistry::from_json_text(const std::string& text, const RegistryContext& ctx) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backend registry is not valid JSON: ") + e.what());
  }
  expect_keys(j, {"encoders", "t2i", "lms", "chat"}, "registry");
  BackendRegistry reg;

  for (const auto& e : j.value("encoders", json::array())) {
    const std::string where = "encoders[]";
    const auto type = get<std::string>(e, "type", where);
    const auto id = get<std::string>(e, "id", where);
    if (type == "linear") {
      expect_keys(e, {"id", "type", "image_size", "dim", "seed"}, where);
      reg.add(std::make_shared<backends::LinearEncoder>(id, get_size(e, where), get<int>(e, "dim", where),
                                                        get<std::uint64_t>(e, "seed", where)));
    } else if (type == "thumbnail") {
      expect_keys(e, {"id", "type", "image_size"}, where);
      reg.add(std::make_shared<backends::ThumbnailEncoder>(id, get_size(e, where)));
    } else {
      throw ConfigError("unknown encoder type '" + type + "'");
    }
  }

  for (const auto& e : j.value("t2i", json::array())) {
    const std::string where = "t2i[]";
    expect_keys(e, {"id", "type", "image_size"}, where);
    const auto type = get<std::string>(e, "type", where);
    if (type != "noise") throw ConfigError("unknown t2i type '" + type + "'");
    reg.add(std::make_shared<backends::NoiseT2I>(get<std::string>(e, "id", where), get_size(e, where)));
  }

  for (const auto& e : j.value("lms", json::array())) {
    const std::string where = "lms[]";
    const auto type = get<std::string>(e, "type", where);
    const auto id = get<std::string>(e, "id", where);
    auto tok = backends::default_mock_tokenizer();
    if (type == "window_mixture") {
      expect_keys(e, {"id", "type", "window", "seed", "sharpness"}, where);
      reg.add(backends::WindowMixtureLM::random(id, std::move(tok), get<int>(e, "window", where),
                                                get<std::uint64_t>(e, "seed", where),
                                                get_or<double>(e, "sharpness", 2.0, where)));
    } else if (type == "bigram") {
      expect_keys(e, {"id", "type", "seed", "sharpness"}, where);
      reg.add(backends::TinyBigramLM::random(id, std::move(tok), get<std::uint64_t>(e, "seed", where),
                                             get_or<double>(e, "sharpness", 2.0, where)));
    } else if (type == "uniform") {
      expect_keys(e, {"id", "type"}, where);
      reg.add(std::make_shared<backends::UniformLM>(id, std::move(tok)));
    } else {
      throw ConfigError("unknown lm type '" + type + "'");
    }
  }

  for (const auto& e : j.value("chat", json::array())) {
    const std::string where = "chat[]";
    const auto type = get<std::string>(e, "type", where);
    const auto id = get<std::string>(e, "id", where);
    if (type == "scripted_planner") {
      expect_keys(e, {"id", "type", "require_visual", "probe", "command_gate", "honor_sandwich"}, where);
      backends::ScriptedPlannerOptions opt;
      opt.watched_instructions = ctx.watched_instructions;
      opt.require_visual = get_or<bool>(e, "require_visual", true, where);
      opt.honor_sandwich = get_or<bool>(e, "honor_sandwich", false, where);
      if (e.contains("probe")) {
        const auto& p = e.at("probe");
        expect_keys(p, {"encoder", "t2i", "seed", "threshold"}, "probe");
        opt.visual_probe = make_visual_probe(reg.encoder(get<std::string>(p, "encoder", "probe")),
                                             reg.t2i(get<std::string>(p, "t2i", "probe")),
                                             get_or<std::uint64_t>(p, "seed", 0, "probe"));
        opt.visual_threshold = get_or<double>(p, "threshold", 0.9, "probe");
      } else if (opt.require_visual) {
        throw ConfigError("scripted planner '" + id + "' requires a visual cue but has no probe");
      }
      if (e.contains("command_gate")) {
        const auto& g = e.at("command_gate");
        expect_keys(g, {"lm", "margin"}, "command_gate");
        opt.command_gate = make_command_gate(reg.lm(get<std::string>(g, "lm", "command_gate")),
                                             get_or<double>(g, "margin", 1.0, "command_gate"));
      }
      reg.add(std::make_shared<backends::ScriptedPlanner>(id, std::move(opt)));
    } else if (type == "keyword_judge") {
      expect_keys(e, {"id", "type"}, where);
      reg.add(std::make_shared<backends::KeywordJudge>(id));
    } else if (type == "scripted_constructor") {
      expect_keys(e, {"id", "type"}, where);
      reg.add(std::make_shared<backends::ScriptedConstructor>(id));
    } else if (type == "http") {
      expect_keys(e, {"id", "type", "role", "base_url", "path", "attempts", "backoff_ms", "timeout_ms"}, where);
      backends::HttpChatOptions opt;
      opt.base_url = get<std::string>(e, "base_url", where);
      opt.path = get_or<std::string>(e, "path", opt.path, where);
      opt.attempts = get_or<int>(e, "attempts", opt.attempts, where);
      opt.initial_backoff = std::chrono::milliseconds(get_or<int>(e, "backoff_ms", 100, where));
      opt.timeout = std::chrono::milliseconds(get_or<int>(e, "timeout_ms", 30000, where));
      backends::ChatRole role;
      try {
        role = backends::chat_role_from_string(get<std::string>(e, "role", where));
      } catch (const ArgumentError& err) {
        throw ConfigError(err.what());
      }
      reg.add(std::make_shared<backends::HttpChatBackend>(id, role, std::move(opt)));
    } else {
      throw ConfigError("unknown chat type '" + type + "'");
    }
  }
  return reg;
}

BackendRegistry BackendRegistry::load(const std::filesystem::path& path, const RegistryContext& ctx) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return from_json_text(text, ctx);
}

std::function<double(const ImageTensor&, const std::string&)> make_visual_probe(backends::EncoderPtr encoder,
                                                                              backends::T2IPtr t2i,
                                                                              std::uint64_t seed) {
  struct State {
    std::mutex mu;
    std::map<std::string, ImageTensor> targets;
  };
  auto state = std::make_shared<State>();
  return [encoder, t2i, seed, state](const ImageTensor& image, const std::string& d) {
    ImageTensor target;
    {
      std::lock_guard lock(state->mu);
      auto it = state->targets.find(d);
      if (it == state->targets.end()) {
        const auto instr = visual::reformulate_instruction(make_instruction(d));
        const auto generated = visual::acquire_target_image(instr, *t2i, seed);
        it = state->targets.emplace(d, resize_bilinear(generated, encoder->input_size())).first;
      }
      target = it->second;
    }
    return visual::embedding_cosine(*encoder, resize_bilinear(image, encoder->input_size()), target);
  };
}

std::function<bool(const std::string&, const std::string&, const std::string&)> make_command_gate(
    backends::LMPtr lm, double margin) {
  return [lm, margin](const std::string& system, const std::string& d, const std::string& tail) {
    const auto& tok = lm->tokenizer();
    const auto target = tok.tokenize_lenient(default_target_action(d));
    const std::string base = system + "\n" + d + "\n";
    const double reference = -backends::lm_logprob(*lm, tok.tokenize_lenient(base), target);
    const double with_tail = -backends::lm_logprob(*lm, tok.tokenize_lenient(base + tail), target);
    return with_tail <= reference - margin;
  };
}

}  // namespace crossinject
