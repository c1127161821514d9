#pragma once

// Reasoning-trace grammar: a line-oriented format for step-by-step traces with
// optional uncertainty suffixes, question blocks, and a terminal final answer.
//
//   Step 1: There is a decorated tree in the room. (Uncertainty: 0.2)
//   Question:
//     Imagined Knowledge Needed: holiday symbols
//     Question: Which holiday is generally associated with a decorated tree?
//     Answer: Christmas
//   Step 2: The decorations are used for Christmas. (Uncertainty: 0.1)
//   Final Answer: Christmas
//
// Labels are matched case-insensitively with flexible whitespace; rendering
// always uses the canonical spelling and indentation shown above.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cor {

enum class TraceVariant { WithoutQA, WithQA, WithGT };

std::string_view to_string(TraceVariant variant);
// Accepts "without_qa", "without-qa", "WithoutQA" and similar spellings.
std::optional<TraceVariant> parse_variant(std::string_view text);

// A confidence value in [0, 1] with at most two decimal digits. The number of
// decimals is part of the value so that "0.3" and "0.30" render as written.
class UncertaintyScore {
 public:
  UncertaintyScore() = default;

  // `scaled` is value * 10^decimals. Throws Precondition when out of [0, 1] or
  // decimals > 2.
  UncertaintyScore(int scaled, int decimals);

  static UncertaintyScore from_hundredths(int hundredths);

  double value() const noexcept;
  // Value expressed in hundredths (exact).
  int hundredths() const noexcept;
  int decimals() const noexcept { return decimals_; }
  std::string to_string() const;

  friend bool operator==(const UncertaintyScore&, const UncertaintyScore&) = default;

 private:
  int scaled_ = 0;
  int decimals_ = 0;
};

struct QuestionBlock {
  std::string imagined_knowledge;
  std::string question;
  std::optional<std::string> answer;

  bool pending() const noexcept { return !answer.has_value(); }
  friend bool operator==(const QuestionBlock&, const QuestionBlock&) = default;
};

struct Step {
  int index = 0;
  std::string text;
  std::optional<UncertaintyScore> uncertainty;

  friend bool operator==(const Step&, const Step&) = default;
};

using StepEvent = std::variant<Step, QuestionBlock>;

struct ReasoningTrace {
  TraceVariant variant = TraceVariant::WithGT;
  std::vector<StepEvent> events;
  std::optional<std::string> final_answer;

  std::size_t step_count() const noexcept;
  std::size_t question_count() const noexcept;
  std::vector<const Step*> steps() const;
  std::vector<UncertaintyScore> uncertainties() const;  // steps lacking a score are skipped
  const QuestionBlock* last_question() const noexcept;

  friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

inline bool is_step(const StepEvent& e) { return std::holds_alternative<Step>(e); }
inline bool is_question(const StepEvent& e) { return std::holds_alternative<QuestionBlock>(e); }

enum class ViolationCode {
  MissingUncertainty,
  ForbiddenQuestionBlock,
  MissingQuestionBlock,
  BadIndexing,
  EmptyStep,
  MissingFinalAnswer,
  UnansweredQuestion,
  MalformedLine,
  // Lexical rules reported by the prompt-kit guard.
  ForbiddenTerm,
  CoordinateLeak,
};

std::string_view to_string(ViolationCode code);
std::optional<ViolationCode> parse_violation_code(std::string_view text);
// Structural violations quarantine a generated record; lexical ones are only reported.
bool is_structural(ViolationCode code) noexcept;

struct Violation {
  ViolationCode code;
  // 1-based event position for trace rules (0 = whole trace); character offset
  // for lexical rules.
  std::size_t location = 0;
  std::string message;

  friend bool operator==(const Violation&, const Violation&) = default;
};

struct ParseWarning {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct ParseOptions {
  std::optional<TraceVariant> variant_hint;
  // Continuation fragments (e.g. the resumed half of a two-stage inference)
  // may legitimately contain only a final answer.
  bool allow_no_steps = false;
};

struct ParsedTrace {
  ReasoningTrace trace;
  std::vector<ParseWarning> warnings;
};

// Throws Error{NoStepsFound | MalformedQuestionBlock}.
ParsedTrace parse_trace_detailed(std::string_view text, const ParseOptions& options = {});
ReasoningTrace parse_trace(std::string_view text,
                           std::optional<TraceVariant> variant_hint = std::nullopt);

TraceVariant infer_variant(const ReasoningTrace& trace);

std::string render_step(const Step& step);
std::string render_question(const QuestionBlock& block);
std::string render_event(const StepEvent& event);
std::string render_trace(const ReasoningTrace& trace);

// All violations of `variant`'s rules, sorted by location. Pure.
std::vector<Violation> validate_trace(const ReasoningTrace& trace, TraceVariant variant);

}  // namespace cor
