#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cor/prompts.hpp"
#include "json.hpp"

namespace cor {

enum class Role { System, User, Assistant };
std::string_view to_string(Role role);

struct ChatMessage {
  Role role = Role::User;
  std::vector<PromptPart> parts;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

enum class ResponseFormat { Freeform, Json };

struct DecodingParams {
  double temperature = 0.0;
  int max_output_tokens = 1024;
  ResponseFormat response_format = ResponseFormat::Freeform;
  friend bool operator==(const DecodingParams&, const DecodingParams&) = default;
};

struct ChatRequest {
  std::string model_id;  // empty = backend default
  std::vector<ChatMessage> messages;
  DecodingParams params;

  bool has_image() const noexcept;
  // Text of every part of every message, newline-joined.
  std::string all_text() const;
  friend bool operator==(const ChatRequest&, const ChatRequest&) = default;
};

struct Usage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct ChatResponse {
  std::string text;
  std::optional<Usage> usage;
  std::chrono::milliseconds latency{0};
  std::string backend_id;
};

void to_json(nlohmann::json& j, const ChatResponse& r);
void from_json(const nlohmann::json& j, ChatResponse& r);

ChatRequest make_request(const PromptText& prompt, DecodingParams params = {}, std::string model_id = {});
// Adds the model's previous answer and a follow-up user turn (repair rounds).
void append_followup(ChatRequest& request, std::string assistant_text, std::string user_text);

// Canonical serialization: sorted keys, text verbatim, images replaced by the
// SHA-256 of their content. Throws Error{UnreadableAttachment}.
nlohmann::json canonical_request(const ChatRequest& request);
std::string request_digest(const ChatRequest& request);

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
  virtual std::string id() const = 0;
  virtual bool image_capable() const = 0;
  virtual std::string default_model() const = 0;

  // Fills an empty model_id and rejects image parts on text-only backends.
  ChatRequest resolve(ChatRequest request) const;
};

// Process-wide switch used by tests (and --dry-run) to prove that no HTTP
// traffic happens: while banned, HttpBackend throws instead of connecting.
class NetworkGuard {
 public:
  static void ban(bool banned) noexcept;
  static bool banned() noexcept;
  static std::uint64_t attempts() noexcept;         // HTTP sends actually started
  static std::uint64_t blocked_attempts() noexcept;  // sends refused while banned
  static void note_attempt() noexcept;
  static void note_blocked() noexcept;
};

class ScopedNetworkBan {
 public:
  ScopedNetworkBan() : previous_(NetworkGuard::banned()) { NetworkGuard::ban(true); }
  ~ScopedNetworkBan() { NetworkGuard::ban(previous_); }
  ScopedNetworkBan(const ScopedNetworkBan&) = delete;
  ScopedNetworkBan& operator=(const ScopedNetworkBan&) = delete;

 private:
  bool previous_;
};

// Responses keyed by request digest, or by substrings of the request text.
// Entries are consulted in order: digest entries first, then substring
// entries; a `responses` list is returned one element per hit, repeating the
// last. Falls back to the default response, else Error{FixtureMiss}.
class FixtureBackend : public ChatBackend {
 public:
  struct Entry {
    std::optional<std::string> digest;
    std::vector<std::string> contains;
    std::vector<std::string> responses;
  };

  FixtureBackend(std::string id = "fixture", bool image_capable = false,
                 std::string model_id = "fixture-model");

  // {"id", "image_capable", "model_id", "default", "entries": [{"digest" | "contains", "response" | "responses"}]}
  static std::unique_ptr<FixtureBackend> from_json(const nlohmann::json& j);
  static std::unique_ptr<FixtureBackend> load(const std::filesystem::path& path);

  FixtureBackend& on_digest(std::string digest, std::string response);
  FixtureBackend& on_contains(std::vector<std::string> needles, std::vector<std::string> responses);
  FixtureBackend& set_default(std::string response);

  ChatResponse complete(const ChatRequest& request) override;
  std::string id() const override { return id_; }
  bool image_capable() const override { return image_capable_; }
  std::string default_model() const override { return model_id_; }

  std::size_t calls() const noexcept { return calls_.load(); }
  std::vector<ChatRequest> requests() const;

 private:
  std::string id_;
  bool image_capable_;
  std::string model_id_;
  std::vector<Entry> entries_;
  std::vector<std::size_t> hits_;
  std::optional<std::string> default_;
  mutable std::mutex mu_;
  std::vector<ChatRequest> log_;
  std::atomic<std::size_t> calls_{0};
};

struct RetryPolicy {
  int max_retries = 5;
  std::chrono::milliseconds base_delay{1000};
  double growth = 2.0;
  // Fraction of the nominal delay added at random; capped at growth - 1 so
  // the delay sequence stays non-decreasing.
  double jitter = 0.1;
};

// Delay before retry number `attempt` (0-based): base * growth^attempt * (1 + jitter * u).
std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, int attempt, std::mt19937_64& rng);

// Token bucket shared by all workers using one backend.
class RateLimiter {
 public:
  using Clock = std::chrono::steady_clock;

  // requests_per_minute <= 0 disables limiting.
  explicit RateLimiter(double requests_per_minute, double burst = 1.0);

  // Blocks until a token is available; returns the time spent waiting.
  std::chrono::nanoseconds acquire();

 private:
  double rate_per_sec_;
  double burst_;
  double tokens_;
  Clock::time_point last_;
  std::mutex mu_;
};

struct HttpBackendConfig {
  std::string id = "http";
  std::string base_url;  // e.g. https://api.openai.com/v1
  std::string api_key;
  std::string model_id;
  bool image_capable = false;
  std::chrono::milliseconds timeout{60'000};
  RetryPolicy retry;
  double requests_per_minute = 60;
  std::uint64_t jitter_seed = 0;
};

// Chat-completions JSON client with retries and rate limiting.
class HttpBackend : public ChatBackend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpBackend(HttpBackendConfig config, Sleeper sleeper = {});

  ChatResponse complete(const ChatRequest& request) override;
  std::string id() const override { return config_.id; }
  bool image_capable() const override { return config_.image_capable; }
  std::string default_model() const override { return config_.model_id; }

  // Request body for `request` (exposed for tests and dry runs).
  nlohmann::json wire_body(const ChatRequest& request) const;
  std::vector<std::chrono::milliseconds> backoff_log() const;
  std::size_t http_attempts() const noexcept { return attempts_.load(); }

 private:
  ChatResponse send_once(const nlohmann::json& body);

  HttpBackendConfig config_;
  Sleeper sleeper_;
  RateLimiter limiter_;
  std::string scheme_host_;
  std::string path_prefix_;
  mutable std::mutex mu_;
  std::mt19937_64 rng_;
  std::vector<std::chrono::milliseconds> backoffs_;
  std::atomic<std::size_t> attempts_{0};
};

struct CacheEntry {
  std::string key;
  ChatResponse response;
  std::string stored_at;
};

// Content-addressed response store: one JSON file per key under `dir`.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);

  std::optional<CacheEntry> get(const std::string& key) const;
  void put(const CacheEntry& entry);
  std::vector<CacheEntry> list() const;
  // Removes unreadable entries and, when `older_than` is set, entries stored
  // before now - older_than. Returns the number removed.
  std::size_t gc(std::optional<std::chrono::hours> older_than = std::nullopt);
  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  std::filesystem::path path_for(const std::string& key) const;

  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

// Serves temperature-0 requests (or all requests when `force`) from the cache.
class CachedBackend : public ChatBackend {
 public:
  CachedBackend(std::shared_ptr<ChatBackend> inner, std::shared_ptr<ResponseCache> cache,
                bool force = false);

  ChatResponse complete(const ChatRequest& request) override;
  std::string id() const override { return inner_->id(); }
  bool image_capable() const override { return inner_->image_capable(); }
  std::string default_model() const override { return inner_->default_model(); }

  std::size_t hits() const noexcept { return hits_.load(); }
  std::size_t misses() const noexcept { return misses_.load(); }

 private:
  std::shared_ptr<ChatBackend> inner_;
  std::shared_ptr<ResponseCache> cache_;
  bool force_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

// Counts calls and otherwise delegates; used by --dry-run accounting and tests.
class CountingBackend : public ChatBackend {
 public:
  explicit CountingBackend(std::shared_ptr<ChatBackend> inner) : inner_(std::move(inner)) {}
  ChatResponse complete(const ChatRequest& request) override {
    ++calls_;
    return inner_->complete(request);
  }
  std::string id() const override { return inner_->id(); }
  bool image_capable() const override { return inner_->image_capable(); }
  std::string default_model() const override { return inner_->default_model(); }
  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  std::shared_ptr<ChatBackend> inner_;
  std::atomic<std::size_t> calls_{0};
};

std::string utc_timestamp();

}  // namespace cor
