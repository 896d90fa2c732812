#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <numeric>

#include "crossinject/config.hpp"
#include "crossinject/harness.hpp"
#include "crossinject/io.hpp"
#include "crossinject/payload.hpp"
#include "helpers.hpp"

using namespace crossinject;
using namespace crossinject::harness;
using crossinject::backends::ChatRole;

namespace {

std::string trimmed(std::string s) {
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

AgentSpec recipe_agent(const std::string& planner = "p") {
  return load_role(config::fixtures_dir() / "roles" / "RecipeMaster.json", planner);
}

std::string reminder_template() { return trimmed(read_text_file(config::fixtures_dir() / "prompts" / "sandwich_reminder.txt")); }

testing::LambdaChat echo_planner(const std::string& id = "p") {
  return testing::LambdaChat(id, ChatRole::kPlanner, [](const std::string& system, auto parts) {
    std::string out = "sys=" + std::to_string(system.size());
    for (const auto& p : parts) out += " " + p.label;
    return out;
  });
}

nlohmann::ordered_json parts_json(const std::vector<PromptPart>& parts) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : parts) {
    nlohmann::ordered_json j;
    j["label"] = p.label;
    if (p.is_image()) {
      j["image_sha256"] = image_digest(*p.image);
    } else {
      j["text"] = p.text;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

// Straight 2-D convolution with the full kernel, reflect padding.
ImageTensor blur_oracle(const ImageTensor& img, int kernel, double sigma) {
  const auto w2 = gaussian_kernel_2d(kernel, sigma);
  const int r = kernel / 2;
  auto refl = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  PixelArray out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < kChannels; ++c) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx)
            acc += w2[static_cast<std::size_t>((dy + r) * kernel + dx + r)] *
                   img.at(refl(y + dy, img.height()), refl(x + dx, img.width()), c);
        out.at(y, x, c) = acc;
      }
  return ImageTensor::clamped(std::move(out));
}

}  // namespace

TEST_CASE("the planner sees image, external, command in that order") {
  const AgentInputs in{ImageTensor::filled(2, 2, 0.1), {Surface::kDocument, "body", std::nullopt}, "cmd"};
  const auto parts = planner_parts(in);
  REQUIRE(parts.size() == 3);
  CHECK(parts[0].is_image());
  CHECK(parts[1].label == kExternalLabel);
  CHECK(parts[1].text == "Retrieved context:\nbody");
  CHECK(parts[2].label == kCommandLabel);
  CHECK(parts[2].text == "cmd");
}

TEST_CASE("Gaussian kernels are normalized and symmetric") {
  for (int k = 1; k <= 15; k += 2) {
    for (double sigma : {0.3, 1.0, k / 6.0 + 0.01, 4.0}) {
      const auto g1 = gaussian_kernel_1d(k, sigma);
      CHECK(std::abs(std::accumulate(g1.begin(), g1.end(), 0.0) - 1.0) < 1e-12);
      for (int i = 0; i < k; ++i) CHECK(g1[static_cast<std::size_t>(i)] == g1[static_cast<std::size_t>(k - 1 - i)]);
      const auto g2 = gaussian_kernel_2d(k, sigma);
      CHECK(std::abs(std::accumulate(g2.begin(), g2.end(), 0.0) - 1.0) < 1e-12);
    }
  }
  CHECK_THROWS_AS(gaussian_kernel_1d(4, 1.0), ArgumentError);
  CHECK_THROWS_AS(gaussian_kernel_1d(3, 0.0), ArgumentError);
}

TEST_CASE("blur leaves constant images unchanged") {
  std::mt19937_64 rng(50);
  for (int t = 0; t < 30; ++t) {
    const double v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const int h = 1 + static_cast<int>(rng() % 12);
    const int w = 1 + static_cast<int>(rng() % 12);
    const int k = 1 + 2 * static_cast<int>(rng() % 6);
    const auto out = gaussian_blur(ImageTensor::filled(h, w, v), k, k / 6.0 + 0.1);
    for (double x : out.values()) CHECK(std::abs(x - v) < 1e-12);
  }
}

TEST_CASE("separable blur matches direct 2-D convolution") {
  std::mt19937_64 rng(51);
  for (int t = 0; t < 10; ++t) {
    const ImageSize size{3 + static_cast<int>(rng() % 10), 3 + static_cast<int>(rng() % 10)};
    const auto img = testing::random_image(size, rng);
    const int k = 1 + 2 * static_cast<int>(rng() % 5);
    const double sigma = 0.5 + static_cast<double>(rng() % 20) / 10.0;
    const auto a = gaussian_blur(img, k, sigma);
    const auto b = blur_oracle(img, k, sigma);
    for (std::size_t i = 0; i < a.values().size(); ++i) CHECK(std::abs(a.values()[i] - b.values()[i]) < 1e-12);
  }
}

TEST_CASE("defense config validation") {
  DefenseConfig cfg;
  CHECK_NOTHROW(cfg.check());
  CHECK(cfg.effective_sigma() == doctest::Approx(1.5));
  cfg.blur_kernel = 8;
  CHECK_THROWS_AS(cfg.check(), ConfigError);
  cfg.blur_kernel = 9;
  cfg.blur_sigma = 0.0;
  CHECK_THROWS_AS(cfg.check(), ConfigError);
}

TEST_CASE("disabled defenses leave the call log byte-identical") {
  const auto agent = recipe_agent();
  auto planner = echo_planner();
  std::mt19937_64 rng(52);
  for (int t = 0; t < 20; ++t) {
    const AgentInputs in{testing::random_image({4, 4}, rng), {Surface::kDocument, testing::random_words(rng, 5), std::nullopt},
                         testing::random_words(rng, 4)};
    std::vector<PlannerCall> plain;
    std::vector<PlannerCall> defended;
    const auto r1 = run_agent(agent, planner, in, &plain);
    const auto r2 = run_defended(agent, planner, in, DefenseConfig{}, reminder_template(), &defended);
    CHECK(r1 == r2);
    CHECK(call_log_line("t", plain.at(0)) == call_log_line("t", defended.at(0)));
  }
}

TEST_CASE("sandwich defense matches the golden part list") {
  const auto agent = recipe_agent();
  const auto d = trimmed(read_text_file(config::fixtures_dir() / "golden" / "injected_instruction.txt"));
  const auto host = read_text_file(config::fixtures_dir() / "hosts" / "document.txt");
  const AgentInputs in{ImageTensor::filled(4, 4, 0.5),
                       payload::inject_document({Surface::kDocument, host, std::nullopt}, d),
                       "Suggest a soup I can make with these leftovers."};
  DefenseConfig cfg;
  cfg.sandwich = true;
  const auto parts = apply_defenses(in, cfg, agent, reminder_template()).planner_view();
  const auto golden = read_text_file(config::fixtures_dir() / "golden" / "sandwich_parts.json");
  CHECK(parts_json(parts).dump(2) + "\n" == golden);

  auto planner = echo_planner();
  std::vector<PlannerCall> log;
  CHECK(run_defended(agent, planner, in, cfg, reminder_template(), &log) ==
        "sys=" + std::to_string(agent.system_prompt.size()) + " image system external command reminder");
  const auto line = call_log_line("t", log.at(0));
  CHECK(line.find("\"label\":\"external\"") < line.find("\"label\":\"command\""));
  CHECK(line.find("\"label\":\"command\"") < line.find("\"label\":\"reminder\""));
}

TEST_CASE("sandwich_wrap refuses double wrapping and empty reminders") {
  CHECK_THROWS_AS(sandwich_wrap("s", "e", "c", ""), ArgumentError);
  CHECK_THROWS_AS(sandwich_wrap("s", "e REM", "c", "REM"), ArgumentError);
  CHECK_THROWS_AS(sandwich_wrap("s", "e", "c REM", "REM"), ArgumentError);
  CHECK(sandwich_wrap("s", "e", "c", "r").size() == 4);
}

TEST_CASE("blur defense changes only the image") {
  const auto agent = recipe_agent();
  std::mt19937_64 rng(53);
  const AgentInputs in{testing::random_image({8, 8}, rng), {Surface::kWebpage, "<p>x</p>", std::nullopt}, "cmd"};
  DefenseConfig cfg;
  cfg.blur = true;
  cfg.blur_kernel = 3;
  const auto out = apply_defenses(in, cfg, agent, reminder_template());
  CHECK_FALSE(out.parts.has_value());
  CHECK(out.inputs.external == in.external);
  CHECK(out.inputs.command == in.command);
  CHECK(out.inputs.image == gaussian_blur(in.image, 3, 0.5));
}

TEST_CASE("run_attacked requires the original command to survive") {
  const auto agent = recipe_agent();
  auto planner = echo_planner();
  const ExternalData e{Surface::kDocument, "b", std::nullopt};
  const AttackBundle bundle(ImageTensor::filled(2, 2, 0.5), e, std::string("prefix cmd suffix"));
  CHECK_NOTHROW(run_attacked(agent, planner, bundle, "cmd"));
  CHECK_THROWS_AS(run_attacked(agent, planner, bundle, "other"), ArgumentError);
}

TEST_CASE("agent checks the planner backend") {
  const auto agent = recipe_agent("p");
  const AgentInputs in{ImageTensor::filled(2, 2, 0.5), {Surface::kDocument, "b", std::nullopt}, "c"};
  auto wrong_id = echo_planner("q");
  CHECK_THROWS_AS(run_agent(agent, wrong_id, in), ArgumentError);
  testing::LambdaChat judge("p", ChatRole::kJudge, [](const std::string&, auto) { return std::string("x"); });
  CHECK_THROWS_AS(run_agent(agent, judge, in), ArgumentError);
}

TEST_CASE("role loading and reminder rendering") {
  const auto agent = recipe_agent();
  CHECK(agent.role_name == "RecipeMaster");
  CHECK(render_reminder("{ROLE_NAME}/{ROLE_NAME}: {ROLE_DESCRIPTION}", agent) ==
        "RecipeMaster/RecipeMaster: " + agent.role_description);

  const auto dir = std::filesystem::temp_directory_path() / "crossinject_role_test";
  std::filesystem::create_directories(dir);
  write_text_file(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(load_role(dir / "bad.json", "p"), ConfigError);
  write_text_file(dir / "missing.json", R"({"role_name":"x"})");
  CHECK_THROWS_AS(load_role(dir / "missing.json", "p"), ConfigError);
  std::filesystem::remove_all(dir);
}
