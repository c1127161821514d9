#include "cor/backend.hpp"

#include "httplib.h"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "cor/digest.hpp"
#include "cor/errors.hpp"
#include "cor/text.hpp"

namespace cor {

using nlohmann::json;

namespace {

std::atomic<bool> g_network_banned{false};
std::atomic<std::uint64_t> g_network_attempts{0};
std::atomic<std::uint64_t> g_network_blocked{0};

bool is_remote_url(std::string_view ref) {
  return text::istarts_with(ref, "http://") || text::istarts_with(ref, "https://");
}

bool is_data_uri(std::string_view ref) { return text::istarts_with(ref, "data:"); }

std::string read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::UnreadableAttachment, "cannot read image " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Payload bytes of a base64 data: URI.
std::string data_uri_bytes(std::string_view uri) {
  std::size_t comma = uri.find(',');
  if (comma == std::string_view::npos || uri.substr(0, comma).find(";base64") == std::string_view::npos) {
    fail(ErrorCode::UnreadableAttachment, "unsupported data URI");
  }
  try {
    return base64_decode(uri.substr(comma + 1));
  } catch (const Error&) {
    fail(ErrorCode::UnreadableAttachment, "data URI is not valid base64");
  }
}

std::string image_content_digest(const std::string& ref) {
  if (is_remote_url(ref)) return sha256_hex("url:" + ref);
  if (is_data_uri(ref)) return sha256_hex(data_uri_bytes(ref));
  return sha256_hex(read_binary(ref));
}

std::string mime_for(const std::filesystem::path& path) {
  std::string ext = text::lower(path.extension().string());
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

std::string image_url_for(const std::string& ref) {
  if (is_remote_url(ref) || is_data_uri(ref)) return ref;
  return "data:" + mime_for(ref) + ";base64," + base64_encode(read_binary(ref));
}

std::string response_format_name(ResponseFormat f) {
  return f == ResponseFormat::Json ? "json" : "freeform";
}

}  // namespace

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

bool ChatRequest::has_image() const noexcept {
  for (const auto& m : messages)
    for (const auto& p : m.parts)
      if (p.kind == PartKind::Image) return true;
  return false;
}

std::string ChatRequest::all_text() const {
  std::vector<std::string> texts;
  for (const auto& m : messages)
    for (const auto& p : m.parts)
      if (p.kind == PartKind::Text) texts.push_back(p.value);
  return text::join(texts, "\n");
}

void to_json(json& j, const ChatResponse& r) {
  j = json{{"text", r.text}, {"latency_ms", r.latency.count()}, {"backend_id", r.backend_id}};
  if (r.usage) {
    j["usage"] = {{"prompt_tokens", r.usage->prompt_tokens},
                  {"completion_tokens", r.usage->completion_tokens}};
  }
}

void from_json(const json& j, ChatResponse& r) {
  r.text = j.at("text").get<std::string>();
  r.latency = std::chrono::milliseconds(j.value("latency_ms", 0LL));
  r.backend_id = j.value("backend_id", "");
  r.usage.reset();
  if (j.contains("usage") && j["usage"].is_object()) {
    r.usage = Usage{j["usage"].value("prompt_tokens", 0), j["usage"].value("completion_tokens", 0)};
  }
}

ChatRequest make_request(const PromptText& prompt, DecodingParams params, std::string model_id) {
  ChatRequest request;
  request.model_id = std::move(model_id);
  request.params = params;
  if (!prompt.system.empty()) request.messages.push_back({Role::System, {PromptPart::text(prompt.system)}});
  require(!prompt.user_parts.empty(), "prompt has no user parts");
  request.messages.push_back({Role::User, prompt.user_parts});
  return request;
}

void append_followup(ChatRequest& request, std::string assistant_text, std::string user_text) {
  request.messages.push_back({Role::Assistant, {PromptPart::text(std::move(assistant_text))}});
  request.messages.push_back({Role::User, {PromptPart::text(std::move(user_text))}});
}

json canonical_request(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    json parts = json::array();
    for (const auto& p : m.parts) {
      if (p.kind == PartKind::Text) {
        parts.push_back({{"type", "text"}, {"text", p.value}});
      } else {
        parts.push_back({{"type", "image"}, {"sha256", image_content_digest(p.value)}});
      }
    }
    messages.push_back({{"role", to_string(m.role)}, {"parts", std::move(parts)}});
  }
  return json{{"model", request.model_id},
              {"messages", std::move(messages)},
              {"params",
               {{"temperature", request.params.temperature},
                {"max_output_tokens", request.params.max_output_tokens},
                {"response_format", response_format_name(request.params.response_format)}}}};
}

std::string request_digest(const ChatRequest& request) {
  return sha256_hex(canonical_request(request).dump());
}

ChatRequest ChatBackend::resolve(ChatRequest request) const {
  if (request.model_id.empty()) request.model_id = default_model();
  bool has_user = std::any_of(request.messages.begin(), request.messages.end(),
                              [](const ChatMessage& m) { return m.role == Role::User; });
  require(has_user, "chat request needs at least one user message");
  if (request.has_image() && !image_capable()) {
    fail(ErrorCode::Precondition, "backend '" + id() + "' is not image-capable");
  }
  return request;
}

// ---- NetworkGuard -------------------------------------------------------------

void NetworkGuard::ban(bool banned) noexcept { g_network_banned.store(banned); }
bool NetworkGuard::banned() noexcept { return g_network_banned.load(); }
std::uint64_t NetworkGuard::attempts() noexcept { return g_network_attempts.load(); }
std::uint64_t NetworkGuard::blocked_attempts() noexcept { return g_network_blocked.load(); }
void NetworkGuard::note_attempt() noexcept { ++g_network_attempts; }
void NetworkGuard::note_blocked() noexcept { ++g_network_blocked; }

// ---- FixtureBackend -----------------------------------------------------------

FixtureBackend::FixtureBackend(std::string id, bool image_capable, std::string model_id)
    : id_(std::move(id)), image_capable_(image_capable), model_id_(std::move(model_id)) {}

std::unique_ptr<FixtureBackend> FixtureBackend::from_json(const json& j) {
  auto backend = std::make_unique<FixtureBackend>(j.value("id", "fixture"), j.value("image_capable", false),
                                                  j.value("model_id", "fixture-model"));
  if (j.contains("default")) backend->set_default(j["default"].get<std::string>());
  for (const auto& e : j.value("entries", json::array())) {
    std::vector<std::string> responses;
    if (e.contains("responses")) {
      responses = e["responses"].get<std::vector<std::string>>();
    } else {
      responses.push_back(e.at("response").get<std::string>());
    }
    if (e.contains("digest")) {
      backend->entries_.push_back({e["digest"].get<std::string>(), {}, std::move(responses)});
    } else {
      std::vector<std::string> needles;
      if (e.at("contains").is_string()) {
        needles.push_back(e["contains"].get<std::string>());
      } else {
        needles = e["contains"].get<std::vector<std::string>>();
      }
      backend->entries_.push_back({std::nullopt, std::move(needles), std::move(responses)});
    }
    backend->hits_.push_back(0);
  }
  return backend;
}

std::unique_ptr<FixtureBackend> FixtureBackend::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read fixture file " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, "fixture file " + path.string() + ": " + e.what());
  }
}

FixtureBackend& FixtureBackend::on_digest(std::string digest, std::string response) {
  std::lock_guard lock(mu_);
  entries_.push_back({std::move(digest), {}, {std::move(response)}});
  hits_.push_back(0);
  return *this;
}

FixtureBackend& FixtureBackend::on_contains(std::vector<std::string> needles,
                                            std::vector<std::string> responses) {
  require(!responses.empty(), "fixture entry needs a response");
  std::lock_guard lock(mu_);
  entries_.push_back({std::nullopt, std::move(needles), std::move(responses)});
  hits_.push_back(0);
  return *this;
}

FixtureBackend& FixtureBackend::set_default(std::string response) {
  std::lock_guard lock(mu_);
  default_ = std::move(response);
  return *this;
}

ChatResponse FixtureBackend::complete(const ChatRequest& raw) {
  ChatRequest request = resolve(raw);
  std::string digest = request_digest(request);
  std::string haystack = request.all_text();
  ++calls_;

  std::lock_guard lock(mu_);
  log_.push_back(request);
  auto pick = [&](std::size_t i) {
    const auto& responses = entries_[i].responses;
    std::size_t k = std::min(hits_[i]++, responses.size() - 1);
    return ChatResponse{responses[k], std::nullopt, std::chrono::milliseconds(0), id_};
  };
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].digest && *entries_[i].digest == digest) return pick(i);
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.digest || e.contains.empty()) continue;
    bool all = std::all_of(e.contains.begin(), e.contains.end(),
                           [&](const std::string& n) { return haystack.find(n) != std::string::npos; });
    if (all) return pick(i);
  }
  if (default_) return ChatResponse{*default_, std::nullopt, std::chrono::milliseconds(0), id_};
  fail(ErrorCode::FixtureMiss, "fixture backend '" + id_ + "' has no entry for request " + digest);
}

std::vector<ChatRequest> FixtureBackend::requests() const {
  std::lock_guard lock(mu_);
  return log_;
}

// ---- retry / rate limit --------------------------------------------------------

std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, int attempt, std::mt19937_64& rng) {
  double growth = std::max(1.0, policy.growth);
  double jitter = std::clamp(policy.jitter, 0.0, growth - 1.0);
  double nominal = static_cast<double>(policy.base_delay.count()) * std::pow(growth, attempt);
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return std::chrono::milliseconds(static_cast<long long>(nominal * (1.0 + jitter * u)));
}

RateLimiter::RateLimiter(double requests_per_minute, double burst)
    : rate_per_sec_(requests_per_minute / 60.0),
      burst_(std::max(1.0, burst)),
      tokens_(std::max(1.0, burst)),
      last_(Clock::now()) {}

std::chrono::nanoseconds RateLimiter::acquire() {
  if (rate_per_sec_ <= 0) return std::chrono::nanoseconds(0);
  std::chrono::nanoseconds wait{0};
  {
    std::lock_guard lock(mu_);
    auto now = Clock::now();
    double elapsed = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    tokens_ = std::min(burst_, tokens_ + elapsed * rate_per_sec_);
    tokens_ -= 1.0;  // reserve; a negative balance is repaid by waiting
    if (tokens_ < 0) {
      wait = std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::duration<double>(-tokens_ / rate_per_sec_));
    }
  }
  if (wait.count() > 0) std::this_thread::sleep_for(wait);
  return wait;
}

// ---- HttpBackend ------------------------------------------------------------

HttpBackend::HttpBackend(HttpBackendConfig config, Sleeper sleeper)
    : config_(std::move(config)),
      sleeper_(sleeper ? std::move(sleeper)
                       : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      limiter_(config_.requests_per_minute),
      rng_(config_.jitter_seed) {
  std::string url = config_.base_url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  std::size_t scheme_end = url.find("://");
  if (url.empty() || scheme_end == std::string::npos) {
    fail(ErrorCode::Config, "backend '" + config_.id + "' needs an absolute base URL, got '" + url + "'");
  }
  std::size_t path_start = url.find('/', scheme_end + 3);
  scheme_host_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
}

json HttpBackend::wire_body(const ChatRequest& request) const {
  json messages = json::array();
  for (const auto& m : request.messages) {
    bool plain = std::all_of(m.parts.begin(), m.parts.end(),
                             [](const PromptPart& p) { return p.kind == PartKind::Text; });
    if (plain) {
      std::vector<std::string> texts;
      for (const auto& p : m.parts) texts.push_back(p.value);
      messages.push_back({{"role", to_string(m.role)}, {"content", text::join(texts, "\n")}});
      continue;
    }
    json content = json::array();
    for (const auto& p : m.parts) {
      if (p.kind == PartKind::Text) {
        content.push_back({{"type", "text"}, {"text", p.value}});
      } else {
        content.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(p.value)}}}});
      }
    }
    messages.push_back({{"role", to_string(m.role)}, {"content", std::move(content)}});
  }
  json body{{"model", request.model_id},
            {"messages", std::move(messages)},
            {"temperature", request.params.temperature},
            {"max_tokens", request.params.max_output_tokens}};
  if (request.params.response_format == ResponseFormat::Json) {
    body["response_format"] = {{"type", "json_object"}};
  }
  return body;
}

ChatResponse HttpBackend::send_once(const json& body) {
  if (NetworkGuard::banned()) {
    NetworkGuard::note_blocked();
    fail(ErrorCode::NetworkForbidden, "network access is disabled");
  }
  NetworkGuard::note_attempt();
  ++attempts_;

  httplib::Client client(scheme_host_);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  auto started = std::chrono::steady_clock::now();
  auto result = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(), "application/json");
  auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

  if (!result) {
    throw BackendError(ErrorCode::Timeout, "transport failure: " + httplib::to_string(result.error()));
  }
  const int status = result->status;
  if (status == 429) throw BackendError(ErrorCode::RateLimited, "HTTP 429", status);
  if (status < 200 || status >= 300) {
    throw BackendError(ErrorCode::Http, "HTTP " + std::to_string(status) + ": " + result->body.substr(0, 200),
                       status);
  }

  json reply = json::parse(result->body, nullptr, false);
  if (reply.is_discarded() || !reply.contains("choices") || !reply["choices"].is_array() ||
      reply["choices"].empty()) {
    throw BackendError(ErrorCode::Malformed, "response has no choices");
  }
  const json& message = reply["choices"][0].value("message", json::object());
  if (!message.contains("content") || !message["content"].is_string()) {
    throw BackendError(ErrorCode::Malformed, "first choice has no text content");
  }
  ChatResponse response{message["content"].get<std::string>(), std::nullopt, latency, config_.id};
  if (reply.contains("usage") && reply["usage"].is_object()) {
    response.usage = Usage{reply["usage"].value("prompt_tokens", 0), reply["usage"].value("completion_tokens", 0)};
  }
  return response;
}

ChatResponse HttpBackend::complete(const ChatRequest& raw) {
  ChatRequest request = resolve(raw);
  const json body = wire_body(request);
  for (int attempt = 0;; ++attempt) {
    limiter_.acquire();
    try {
      return send_once(body);
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= config_.retry.max_retries) throw;
      std::chrono::milliseconds delay;
      {
        std::lock_guard lock(mu_);
        delay = backoff_delay(config_.retry, attempt, rng_);
        backoffs_.push_back(delay);
      }
      sleeper_(delay);
    }
  }
}

std::vector<std::chrono::milliseconds> HttpBackend::backoff_log() const {
  std::lock_guard lock(mu_);
  return backoffs_;
}

// ---- cache -----------------------------------------------------------------------

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) fail(ErrorCode::Io, "cannot create cache directory " + dir_.string() + ": " + ec.message());
}

std::filesystem::path ResponseCache::path_for(const std::string& key) const {
  return dir_ / (key + ".json");
}

std::optional<CacheEntry> ResponseCache::get(const std::string& key) const {
  std::lock_guard lock(mu_);
  std::ifstream in(path_for(key));
  if (!in) return std::nullopt;
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("response")) return std::nullopt;
  try {
    return CacheEntry{j.value("key", key), j["response"].get<ChatResponse>(), j.value("stored_at", "")};
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

void ResponseCache::put(const CacheEntry& entry) {
  json j{{"key", entry.key}, {"stored_at", entry.stored_at}, {"response", entry.response}};
  std::lock_guard lock(mu_);
  auto final_path = path_for(entry.key);
  auto tmp = final_path;
  tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write cache entry " + tmp.string());
    out << j.dump(2) << "\n";
  }
  std::error_code ec;
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) fail(ErrorCode::Io, "cannot commit cache entry: " + ec.message());
}

std::vector<CacheEntry> ResponseCache::list() const {
  std::vector<CacheEntry> out;
  std::vector<std::string> keys;
  for (const auto& f : std::filesystem::directory_iterator(dir_)) {
    if (f.path().extension() == ".json") keys.push_back(f.path().stem().string());
  }
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys)
    if (auto e = get(k)) out.push_back(std::move(*e));
  return out;
}

std::size_t ResponseCache::gc(std::optional<std::chrono::hours> older_than) {
  std::size_t removed = 0;
  auto cutoff = std::chrono::system_clock::now() - older_than.value_or(std::chrono::hours(0));
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::directory_iterator(dir_)) files.push_back(f.path());
  for (const auto& path : files) {
    bool remove = false;
    if (path.extension() != ".json") {
      remove = path.string().find(".json.tmp") != std::string::npos;
    } else if (auto e = get(path.stem().string()); !e) {
      remove = true;
    } else if (older_than) {
      std::tm tm{};
      std::istringstream in(e->stored_at);
      in >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
      remove = in.fail() || std::chrono::system_clock::from_time_t(timegm(&tm)) < cutoff;
    }
    if (remove && std::filesystem::remove(path)) ++removed;
  }
  return removed;
}

CachedBackend::CachedBackend(std::shared_ptr<ChatBackend> inner, std::shared_ptr<ResponseCache> cache, bool force)
    : inner_(std::move(inner)), cache_(std::move(cache)), force_(force) {}

ChatResponse CachedBackend::complete(const ChatRequest& raw) {
  ChatRequest request = resolve(raw);
  if (!force_ && request.params.temperature != 0.0) return inner_->complete(request);
  std::string key = request_digest(request);
  if (auto hit = cache_->get(key)) {
    ++hits_;
    return hit->response;
  }
  ++misses_;
  ChatResponse response = inner_->complete(request);
  cache_->put({key, response, utc_timestamp()});
  return response;
}

}  // namespace cor
