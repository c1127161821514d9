#pragma once

// Two-stage inference: the model reasons until it asks a question or
// answers; an external answerer fills the question; the model resumes from
// the spliced context.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cor/backend.hpp"
#include "cor/prompts.hpp"
#include "cor/sample.hpp"
#include "cor/trace.hpp"
#include "json.hpp"

namespace cor {

inline constexpr std::string_view kReasoningDirective =
    "Analyze the image and outline your reasoning process step by step before providing your final answer.";
inline constexpr std::string_view kContinueDirective =
    "Continue your reasoning from the answered question; do not repeat completed steps.";

struct InferencePolicy {
  int max_question_rounds = 1;
  DecodingParams params;
  bool require_final_answer = true;
  // Attach the sample image to answerer requests when the answerer accepts images.
  bool answerer_sees_image = true;

  void validate() const;
};

enum class SessionState { Stage1, QuestionPending, Resuming, Finalized, Failed };
std::string_view to_string(SessionState state);

enum class FailureCause { None, Backend, RoundsExhausted, MissingFinalAnswer, Unparseable, Answerer };
std::string_view to_string(FailureCause cause);

struct AnswerExchange {
  std::string answerer_id;
  std::string question;
  std::string answer;
  std::vector<std::string> prompt_digests;  // ModelApi only
  std::vector<std::string> raw_outputs;
  double latency_ms = 0;
};

struct TurnRecord {
  std::string stage;  // "stage1" or "resume"
  std::string prompt_digest;
  std::string raw_output;
  std::vector<StepEvent> events;  // accepted events after splicing
  std::vector<std::string> notes;
  std::optional<AnswerExchange> answer;
  double latency_ms = 0;
};

struct InferenceSession {
  Sample sample;
  SessionState state = SessionState::Stage1;
  std::vector<TurnRecord> transcript;
  std::vector<StepEvent> events;  // accumulated context
  std::optional<ReasoningTrace> final_trace;
  std::vector<Violation> violations;
  FailureCause cause = FailureCause::None;
  std::string error;
  int rounds_used = 0;
  std::string vlm_id;

  // sha256 of the canonical transcript, timings excluded.
  std::string transcript_hash() const;
};

nlohmann::json session_json(const InferenceSession& session, bool with_timings = true);

// ---------------------------------------------------------------- answerers

enum class AnswererKind { ModelApi, Fixture, HumanCli };
std::string_view to_string(AnswererKind kind);

class Answerer {
 public:
  virtual ~Answerer() = default;
  virtual AnswererKind kind() const = 0;
  virtual std::string id() const = 0;
  // Fills exchange.answer (and raw outputs where applicable).
  virtual void answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy& policy,
                      AnswerExchange& exchange) = 0;
};

class ModelApiAnswerer : public Answerer {
 public:
  ModelApiAnswerer(ChatBackend& backend, const PromptKit& prompts);
  AnswererKind kind() const override { return AnswererKind::ModelApi; }
  std::string id() const override { return backend_.id(); }
  void answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy& policy,
              AnswerExchange& exchange) override;

 private:
  ChatBackend& backend_;
  const PromptKit& prompts_;
};

// Extracts the "answer" field of the first JSON object in `text`.
std::optional<std::string> extract_json_answer(std::string_view text);

// Keyed by (sample_id, sha256 of the normalized question); sample_id "*"
// matches any sample.
//   {"id"?, "answers": [{"sample_id", "question" | "question_hash", "answer"}]}
class FixtureAnswerer : public Answerer {
 public:
  explicit FixtureAnswerer(std::string id = "fixture-answerer") : id_(std::move(id)) {}
  static std::unique_ptr<FixtureAnswerer> from_json(const nlohmann::json& j);
  static std::unique_ptr<FixtureAnswerer> load(const std::filesystem::path& path);

  FixtureAnswerer& add(std::string sample_id, std::string_view question, std::string answer);
  FixtureAnswerer& add_hash(std::string sample_id, std::string question_hash, std::string answer);

  AnswererKind kind() const override { return AnswererKind::Fixture; }
  std::string id() const override { return id_; }
  void answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy& policy,
              AnswerExchange& exchange) override;

 private:
  std::string id_;
  std::map<std::pair<std::string, std::string>, std::string> answers_;
};

std::string normalize_question(std::string_view question);
std::string question_hash(std::string_view question);

// Line protocol: prints the question, reads one line; an empty line or EOF aborts.
class HumanCliAnswerer : public Answerer {
 public:
  HumanCliAnswerer(std::istream& in, std::ostream& out) : in_(in), out_(out) {}
  AnswererKind kind() const override { return AnswererKind::HumanCli; }
  std::string id() const override { return "human"; }
  void answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy& policy,
              AnswerExchange& exchange) override;

 private:
  std::istream& in_;
  std::ostream& out_;
};

// ---------------------------------------------------------------- inference

// Throws AnswerParseError, FixtureMiss, or HumanAborted.
QuestionBlock answer_question(const QuestionBlock& block, const Sample& sample, Answerer& answerer,
                              const InferencePolicy& policy = {}, AnswerExchange* exchange = nullptr);

// state must be Stage1 or Resuming.
PromptText stage_prompts(const InferenceSession& session, bool image_capable = true);

// Backend and answerer failures end the session in state Failed.
InferenceSession run_inference(const Sample& sample, ChatBackend& vlm, Answerer& answerer,
                               const InferencePolicy& policy = {});

class SessionWriter {
 public:
  explicit SessionWriter(std::filesystem::path path);
  void write(const InferenceSession& session);

 private:
  std::filesystem::path path_;
  std::mutex mu_;
};

}  // namespace cor
