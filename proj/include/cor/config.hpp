#pragma once

// Run configuration: one JSON document. Secrets come from the environment
// only (COR_API_KEY); COR_API_BASE and COR_MODEL fill unset HTTP fields.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cor/backend.hpp"
#include "cor/dataset.hpp"
#include "cor/orchestrator.hpp"
#include "cor/prompts.hpp"
#include "json.hpp"

namespace cor {

enum class BackendKind { Http, Fixture };

struct BackendSpec {
  std::string name;
  BackendKind kind = BackendKind::Http;
  std::string base_url;
  std::string model_id;
  bool image_capable = false;
  std::filesystem::path fixture;  // fixture kind only
  double requests_per_minute = 60;
  RetryPolicy retry;
  std::chrono::milliseconds timeout{60'000};
};

struct Config {
  std::vector<BackendSpec> backends;
  // Pipeline role (builder, vlm, answerer, judge) -> backend name.
  std::map<std::string, std::string> roles;

  std::optional<std::filesystem::path> templates_dir;  // unset: compiled-in templates
  std::filesystem::path cache_dir = ".cor/cache";
  std::filesystem::path runs_dir = "runs";
  std::filesystem::path corpora_dir = "corpora";
  std::filesystem::path results_dir = "results";
  bool cache_enabled = true;
  bool cache_force = false;

  DecodingParams decoding;
  ImageMode image_mode = ImageMode::Auto;
  SpikePolicy spike;
  InferencePolicy inference;
  LexicalPolicy lexical;
  std::size_t workers = 4;
  std::optional<std::filesystem::path> answer_fixture;

  nlohmann::json source = nlohmann::json::object();  // document as read

  const BackendSpec& backend(std::string_view name_or_role) const;
  // First 12 hex digits of sha256 over the canonical document.
  std::string digest() const;
};

// Relative paths resolve against `base_dir`. Throws Error{Config}.
Config config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
Config load_config(const std::filesystem::path& path);
// No file: a single HTTP backend named "default" serving every role.
Config default_config();

struct BackendOptions {
  bool require_api_key = true;
  bool use_cache = true;
  HttpBackend::Sleeper sleeper;
};

std::shared_ptr<ChatBackend> make_backend(const Config& config, std::string_view name_or_role,
                                          const BackendOptions& options = {});

PromptKit make_prompt_kit(const Config& config);

}  // namespace cor
