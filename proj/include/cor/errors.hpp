#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cor {

enum class ErrorCode {
  // trace-format
  NoStepsFound,
  MalformedQuestionBlock,
  // prompt-kit
  MissingAnnotations,
  MissingGold,
  TemplateError,
  PromptTooLong,
  // dataset-builder
  SchemaError,
  // orchestrator
  AnswerParseError,
  FixtureMiss,
  HumanAborted,
  // evaluator
  JudgeParseError,
  ScoreOutOfRange,
  // backends
  Timeout,
  RateLimited,
  Http,
  Malformed,
  UnreadableAttachment,
  NetworkForbidden,
  // shared
  Precondition,
  Config,
  Io,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a code so callers (and the CLI
// exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by backends. `status` is the HTTP status for ErrorCode::Http, 0 otherwise.
class BackendError : public Error {
 public:
  BackendError(ErrorCode code, const std::string& message, int status = 0)
      : Error(code, message), status_(status) {}

  int status() const noexcept { return status_; }
  bool retryable() const noexcept {
    return code() == ErrorCode::Timeout || code() == ErrorCode::RateLimited ||
           (code() == ErrorCode::Http && status_ >= 500);
  }

 private:
  int status_;
};

// Schema errors carry a JSON-pointer-like path to the offending field, e.g. "images[1].id".
class SchemaError : public Error {
 public:
  SchemaError(std::string path, const std::string& message)
      : Error(ErrorCode::SchemaError, path + ": " + message), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(ErrorCode::Precondition, message);
}

}  // namespace cor
