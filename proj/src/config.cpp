#include "cor/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "cor/digest.hpp"
#include "cor/errors.hpp"

namespace cor {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& msg) { fail(ErrorCode::Config, path + ": " + msg); }

void check_keys(const json& j, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) bad(path, "expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) bad(path, "unknown key \"" + key + "\"");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    bad(path + "." + key, "wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

DecodingParams parse_decoding(const json& j, const std::string& path, DecodingParams d) {
  check_keys(j, path, {"temperature", "max_output_tokens"});
  d.temperature = field(j, "temperature", path, d.temperature);
  d.max_output_tokens = field(j, "max_output_tokens", path, d.max_output_tokens);
  if (d.temperature < 0 || d.max_output_tokens <= 0) bad(path, "temperature >= 0 and max_output_tokens > 0");
  return d;
}

BackendSpec parse_backend(const json& j, const std::string& path, const fs::path& base) {
  check_keys(j, path,
             {"name", "kind", "base_url", "model_id", "image_capable", "fixture", "requests_per_minute",
              "max_retries", "base_delay_ms", "backoff_growth", "jitter", "timeout_ms"});
  BackendSpec b;
  b.name = field<std::string>(j, "name", path, "");
  if (b.name.empty()) bad(path + ".name", "required");
  std::string kind = field<std::string>(j, "kind", path, "http");
  if (kind == "http") b.kind = BackendKind::Http;
  else if (kind == "fixture") b.kind = BackendKind::Fixture;
  else bad(path + ".kind", "expected http or fixture");
  b.base_url = field<std::string>(j, "base_url", path, "");
  b.model_id = field<std::string>(j, "model_id", path, "");
  b.image_capable = field(j, "image_capable", path, false);
  b.requests_per_minute = field(j, "requests_per_minute", path, b.requests_per_minute);
  b.retry.max_retries = field(j, "max_retries", path, b.retry.max_retries);
  b.retry.base_delay = std::chrono::milliseconds(field<long long>(j, "base_delay_ms", path, b.retry.base_delay.count()));
  b.retry.growth = field(j, "backoff_growth", path, b.retry.growth);
  b.retry.jitter = field(j, "jitter", path, b.retry.jitter);
  b.timeout = std::chrono::milliseconds(field<long long>(j, "timeout_ms", path, b.timeout.count()));
  if (b.retry.max_retries < 0 || b.retry.growth < 1.0 || b.retry.jitter < 0) bad(path, "invalid retry settings");
  if (b.kind == BackendKind::Fixture) {
    std::string f = field<std::string>(j, "fixture", path, "");
    if (f.empty()) bad(path + ".fixture", "required for fixture backends");
    b.fixture = resolve(base, f);
    if (!fs::is_regular_file(b.fixture)) bad(path + ".fixture", "no such file " + b.fixture.string());
  }
  return b;
}

void check_output_dir(const fs::path& p, const std::string& path) {
  std::error_code ec;
  if (fs::exists(p, ec) && !fs::is_directory(p, ec)) bad(path, p.string() + " exists and is not a directory");
}

}  // namespace

const BackendSpec& Config::backend(std::string_view name_or_role) const {
  std::string name(name_or_role);
  if (auto it = roles.find(name); it != roles.end()) name = it->second;
  for (const auto& b : backends)
    if (b.name == name) return b;
  fail(ErrorCode::Config, "no backend named \"" + name + "\"");
}

std::string Config::digest() const { return sha256_hex(source.dump()).substr(0, 12); }

Config config_from_json(const json& j, const fs::path& base) {
  check_keys(j, "config",
             {"backends", "roles", "paths", "cache", "decoding", "image_mode", "spike_policy", "inference_policy",
              "lexical_policy", "workers", "answer_fixture"});
  Config c;
  c.source = j;

  if (j.contains("backends")) {
    if (!j["backends"].is_array()) bad("config.backends", "expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < j["backends"].size(); ++i) {
      auto b = parse_backend(j["backends"][i], "config.backends[" + std::to_string(i) + "]", base);
      if (!names.insert(b.name).second) bad("config.backends", "duplicate backend name \"" + b.name + "\"");
      c.backends.push_back(std::move(b));
    }
  }
  if (j.contains("roles")) {
    check_keys(j["roles"], "config.roles", {"builder", "vlm", "answerer", "judge"});
    for (const auto& [role, name] : j["roles"].items()) {
      if (!name.is_string()) bad("config.roles." + role, "expected a backend name");
      c.roles[role] = name.get<std::string>();
      c.backend(role);  // must resolve
    }
  }
  if (j.contains("paths")) {
    const json& p = j["paths"];
    check_keys(p, "config.paths", {"templates", "cache", "runs", "corpora", "results"});
    if (p.contains("templates")) {
      c.templates_dir = resolve(base, field<std::string>(p, "templates", "config.paths", ""));
      if (!fs::is_directory(*c.templates_dir)) bad("config.paths.templates", "no such directory");
    }
    c.cache_dir = resolve(base, field<std::string>(p, "cache", "config.paths", c.cache_dir.string()));
    c.runs_dir = resolve(base, field<std::string>(p, "runs", "config.paths", c.runs_dir.string()));
    c.corpora_dir = resolve(base, field<std::string>(p, "corpora", "config.paths", c.corpora_dir.string()));
    c.results_dir = resolve(base, field<std::string>(p, "results", "config.paths", c.results_dir.string()));
  } else {
    c.cache_dir = resolve(base, c.cache_dir.string());
    c.runs_dir = resolve(base, c.runs_dir.string());
    c.corpora_dir = resolve(base, c.corpora_dir.string());
    c.results_dir = resolve(base, c.results_dir.string());
  }
  check_output_dir(c.cache_dir, "config.paths.cache");
  check_output_dir(c.runs_dir, "config.paths.runs");
  check_output_dir(c.corpora_dir, "config.paths.corpora");
  check_output_dir(c.results_dir, "config.paths.results");

  if (j.contains("cache")) {
    check_keys(j["cache"], "config.cache", {"enabled", "force"});
    c.cache_enabled = field(j["cache"], "enabled", "config.cache", c.cache_enabled);
    c.cache_force = field(j["cache"], "force", "config.cache", c.cache_force);
  }
  if (j.contains("decoding")) c.decoding = parse_decoding(j["decoding"], "config.decoding", c.decoding);
  c.inference.params = c.decoding;

  std::string mode = field<std::string>(j, "image_mode", "config", "auto");
  if (mode == "auto") c.image_mode = ImageMode::Auto;
  else if (mode == "text") c.image_mode = ImageMode::TextOnly;
  else if (mode == "image") c.image_mode = ImageMode::Image;
  else bad("config.image_mode", "expected auto, text or image");

  if (j.contains("spike_policy")) {
    const json& s = j["spike_policy"];
    check_keys(s, "config.spike_policy", {"rise_threshold", "absolute_threshold", "mode"});
    c.spike.rise_threshold = field(s, "rise_threshold", "config.spike_policy", c.spike.rise_threshold);
    c.spike.absolute_threshold = field(s, "absolute_threshold", "config.spike_policy", c.spike.absolute_threshold);
    std::string m = field<std::string>(s, "mode", "config.spike_policy", "first");
    if (m == "first") c.spike.mode = SpikePolicy::Mode::FirstSpike;
    else if (m == "all") c.spike.mode = SpikePolicy::Mode::AllSpikes;
    else bad("config.spike_policy.mode", "expected first or all");
  }
  try {
    c.spike.validate();
  } catch (const Error& e) {
    bad("config.spike_policy", e.what());
  }

  if (j.contains("inference_policy")) {
    const json& p = j["inference_policy"];
    const std::string path = "config.inference_policy";
    check_keys(p, path, {"max_question_rounds", "require_final_answer", "answerer_sees_image", "decoding"});
    c.inference.max_question_rounds = field(p, "max_question_rounds", path, c.inference.max_question_rounds);
    c.inference.require_final_answer = field(p, "require_final_answer", path, c.inference.require_final_answer);
    c.inference.answerer_sees_image = field(p, "answerer_sees_image", path, c.inference.answerer_sees_image);
    if (p.contains("decoding")) c.inference.params = parse_decoding(p["decoding"], path + ".decoding", c.decoding);
  }
  try {
    c.inference.validate();
  } catch (const Error& e) {
    bad("config.inference_policy", e.what());
  }

  if (j.contains("lexical_policy")) {
    const json& l = j["lexical_policy"];
    const std::string path = "config.lexical_policy";
    check_keys(l, path, {"forbidden_terms", "detect_coordinates", "coordinate_min_digits"});
    c.lexical.forbidden_terms = field(l, "forbidden_terms", path, c.lexical.forbidden_terms);
    c.lexical.detect_coordinates = field(l, "detect_coordinates", path, c.lexical.detect_coordinates);
    c.lexical.coordinate_min_digits = field(l, "coordinate_min_digits", path, c.lexical.coordinate_min_digits);
    if (c.lexical.coordinate_min_digits < 1) bad(path + ".coordinate_min_digits", "must be >= 1");
  }

  long long workers = field<long long>(j, "workers", "config", static_cast<long long>(c.workers));
  if (workers < 1) bad("config.workers", "must be >= 1");
  c.workers = static_cast<std::size_t>(workers);

  if (j.contains("answer_fixture")) {
    c.answer_fixture = resolve(base, field<std::string>(j, "answer_fixture", "config", ""));
    if (!fs::is_regular_file(*c.answer_fixture)) bad("config.answer_fixture", "no such file");
  }

  if (c.backends.empty()) {
    Config d = default_config();
    c.backends = d.backends;
  }
  for (std::string_view role : {"builder", "vlm", "answerer", "judge"})
    if (!c.roles.count(std::string(role))) c.roles[std::string(role)] = c.backends.front().name;
  return c;
}

Config load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Config, "cannot read config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::Config, path.string() + ": not valid JSON");
  return config_from_json(j, path.parent_path());
}

Config default_config() {
  Config c;
  BackendSpec b;
  b.name = "default";
  b.image_capable = true;
  c.backends.push_back(b);
  for (std::string_view role : {"builder", "vlm", "answerer", "judge"}) c.roles[std::string(role)] = "default";
  return c;
}

std::shared_ptr<ChatBackend> make_backend(const Config& config, std::string_view name_or_role,
                                          const BackendOptions& options) {
  const BackendSpec& spec = config.backend(name_or_role);
  std::shared_ptr<ChatBackend> backend;
  if (spec.kind == BackendKind::Fixture) {
    backend = FixtureBackend::load(spec.fixture);
  } else {
    HttpBackendConfig h;
    h.id = spec.name;
    h.base_url = spec.base_url.empty() ? env_or("COR_API_BASE", "https://api.openai.com/v1") : spec.base_url;
    h.model_id = spec.model_id.empty() ? env_or("COR_MODEL", "gpt-4o") : spec.model_id;
    h.api_key = env_or("COR_API_KEY", "");
    if (h.api_key.empty() && options.require_api_key)
      fail(ErrorCode::Config, "backend \"" + spec.name + "\" needs COR_API_KEY in the environment");
    h.image_capable = spec.image_capable;
    h.timeout = spec.timeout;
    h.retry = spec.retry;
    h.requests_per_minute = spec.requests_per_minute;
    backend = std::make_shared<HttpBackend>(std::move(h), options.sleeper);
  }
  if (options.use_cache && config.cache_enabled)
    backend = std::make_shared<CachedBackend>(backend, std::make_shared<ResponseCache>(config.cache_dir),
                                              config.cache_force);
  return backend;
}

PromptKit make_prompt_kit(const Config& config) {
  return PromptKit(config.templates_dir ? TemplateSet::load(*config.templates_dir) : TemplateSet::defaults());
}

}  // namespace cor
