#include "cor/trace.hpp"

#include <algorithm>
#include <cctype>

#include "cor/errors.hpp"
#include "cor/text.hpp"

namespace cor {

namespace {

constexpr int kPow10[] = {1, 10, 100};

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

struct ParsedNumber {
  bool negative = false;
  long long integer = 0;
  std::string fraction;
};

std::optional<ParsedNumber> parse_decimal(std::string_view s) {
  s = text::trim(s);
  ParsedNumber n;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    n.negative = s.front() == '-';
    s.remove_prefix(1);
  }
  std::size_t i = 0;
  while (i < s.size() && is_digit(s[i])) {
    if (n.integer < 1'000'000) n.integer = n.integer * 10 + (s[i] - '0');
    ++i;
  }
  bool has_int = i > 0;
  if (i < s.size() && s[i] == '.') {
    ++i;
    while (i < s.size() && is_digit(s[i])) n.fraction.push_back(s[i++]);
  }
  if (i != s.size() || (!has_int && n.fraction.empty())) return std::nullopt;
  return n;
}

// Converts a decimal literal to a score, capping precision at two decimals and
// clamping to [0, 1]; each adjustment is reported through `note`.
UncertaintyScore to_score(const ParsedNumber& n, std::string* note) {
  int decimals = static_cast<int>(std::min<std::size_t>(n.fraction.size(), 2));
  long long scaled = n.integer;
  for (int d = 0; d < decimals; ++d) scaled = scaled * 10 + (n.fraction[d] - '0');
  if (n.fraction.size() > 2) {
    if (n.fraction[2] >= '5') ++scaled;  // round half up on the third digit
    *note = "uncertainty precision capped at 2 decimals";
  }
  long long one = kPow10[decimals];
  if (n.negative && scaled != 0) {
    *note = "uncertainty below 0 clamped";
    scaled = 0;
  } else if (scaled > one) {
    *note = "uncertainty above 1 clamped";
    scaled = one;
  }
  return UncertaintyScore(static_cast<int>(scaled), decimals);
}

// "Step <k>: <text> [(Uncertainty: <u>)]"
bool parse_step_line(std::string_view line, Step* step, std::string* note) {
  std::string_view s = text::trim(line);
  if (!text::istarts_with(s, "step")) return false;
  s.remove_prefix(4);
  s = text::trim(s);
  std::size_t digits = 0;
  while (digits < s.size() && is_digit(s[digits])) ++digits;
  if (digits == 0 || digits > 9) return false;
  int index = std::stoi(std::string(s.substr(0, digits)));
  s.remove_prefix(digits);
  s = text::trim(s);
  if (s.empty() || s.front() != ':') return false;
  s = text::trim(s.substr(1));

  step->index = index;
  step->uncertainty.reset();
  if (!s.empty() && s.back() == ')') {
    std::size_t open = s.rfind('(');
    if (open != std::string_view::npos) {
      std::string_view inner = s.substr(open + 1, s.size() - open - 2);
      std::string_view value;
      if (text::match_label(inner, {"uncertainty", "score"}, &value) ||
          text::match_label(inner, {"uncertainty"}, &value)) {
        if (auto number = parse_decimal(value)) {
          step->uncertainty = to_score(*number, note);
          s = text::trim(s.substr(0, open));
        }
      }
    }
  }
  step->text = std::string(s);
  return true;
}

bool is_question_header(std::string_view line) {
  std::string_view rest;
  return text::match_label(line, {"question"}, &rest) && rest.empty();
}

class LineCursor {
 public:
  explicit LineCursor(std::vector<std::string_view> lines) : lines_(std::move(lines)) {}

  // Advances past blank lines; returns false at end of input.
  bool next_nonblank() {
    while (pos_ < lines_.size() && text::trim(lines_[pos_]).empty()) ++pos_;
    return pos_ < lines_.size();
  }
  std::string_view current() const { return lines_[pos_]; }
  std::size_t line_number() const { return pos_ + 1; }
  void advance() { ++pos_; }
  bool done() const { return pos_ >= lines_.size(); }

 private:
  std::vector<std::string_view> lines_;
  std::size_t pos_ = 0;
};

[[noreturn]] void malformed_block(std::size_t line, const std::string& what) {
  fail(ErrorCode::MalformedQuestionBlock,
       "question block at line " + std::to_string(line) + ": " + what);
}

QuestionBlock parse_question_block(LineCursor& cursor, std::size_t header_line) {
  QuestionBlock block;
  std::string_view rest;

  if (!cursor.next_nonblank()) malformed_block(header_line, "missing 'Imagined Knowledge Needed:'");
  if (!text::match_label(cursor.current(), {"imagined", "knowledge", "needed"}, &rest) ||
      rest.empty()) {
    malformed_block(cursor.line_number(), "expected 'Imagined Knowledge Needed:' line");
  }
  block.imagined_knowledge = std::string(rest);
  cursor.advance();

  if (!cursor.next_nonblank()) malformed_block(header_line, "missing 'Question:' line");
  if (!text::match_label(cursor.current(), {"question"}, &rest) || rest.empty()) {
    malformed_block(cursor.line_number(), "expected 'Question:' line");
  }
  block.question = std::string(rest);
  cursor.advance();

  if (cursor.next_nonblank() && text::match_label(cursor.current(), {"answer"}, &rest)) {
    if (!rest.empty()) block.answer = std::string(rest);
    cursor.advance();
  }
  return block;
}

std::size_t count_if_events(const std::vector<StepEvent>& events, bool want_step) {
  return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [&](const StepEvent& e) {
    return is_step(e) == want_step;
  }));
}

}  // namespace

std::string_view to_string(TraceVariant variant) {
  switch (variant) {
    case TraceVariant::WithoutQA: return "without_qa";
    case TraceVariant::WithQA: return "with_qa";
    case TraceVariant::WithGT: return "with_gt";
  }
  return "unknown";
}

std::optional<TraceVariant> parse_variant(std::string_view s) {
  std::string key;
  for (char c : s) {
    if (c == '-' || c == '_' || c == ' ') continue;
    key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  if (key == "withoutqa") return TraceVariant::WithoutQA;
  if (key == "withqa") return TraceVariant::WithQA;
  if (key == "withgt") return TraceVariant::WithGT;
  return std::nullopt;
}

UncertaintyScore::UncertaintyScore(int scaled, int decimals) : scaled_(scaled), decimals_(decimals) {
  require(decimals >= 0 && decimals <= 2, "uncertainty supports at most 2 decimals");
  require(scaled >= 0 && scaled <= kPow10[decimals], "uncertainty must lie in [0, 1]");
}

UncertaintyScore UncertaintyScore::from_hundredths(int hundredths) {
  if (hundredths % 100 == 0) return UncertaintyScore(hundredths / 100, 0);
  if (hundredths % 10 == 0) return UncertaintyScore(hundredths / 10, 1);
  return UncertaintyScore(hundredths, 2);
}

double UncertaintyScore::value() const noexcept {
  return static_cast<double>(scaled_) / kPow10[decimals_];
}

int UncertaintyScore::hundredths() const noexcept { return scaled_ * kPow10[2 - decimals_]; }

std::string UncertaintyScore::to_string() const {
  if (decimals_ == 0) return std::to_string(scaled_);
  std::string digits = std::to_string(scaled_ % kPow10[decimals_]);
  digits.insert(0, static_cast<std::size_t>(decimals_) - digits.size(), '0');
  return std::to_string(scaled_ / kPow10[decimals_]) + "." + digits;
}

std::size_t ReasoningTrace::step_count() const noexcept { return count_if_events(events, true); }
std::size_t ReasoningTrace::question_count() const noexcept {
  return count_if_events(events, false);
}

std::vector<const Step*> ReasoningTrace::steps() const {
  std::vector<const Step*> out;
  for (const auto& e : events)
    if (const auto* s = std::get_if<Step>(&e)) out.push_back(s);
  return out;
}

std::vector<UncertaintyScore> ReasoningTrace::uncertainties() const {
  std::vector<UncertaintyScore> out;
  for (const Step* s : steps())
    if (s->uncertainty) out.push_back(*s->uncertainty);
  return out;
}

const QuestionBlock* ReasoningTrace::last_question() const noexcept {
  for (auto it = events.rbegin(); it != events.rend(); ++it)
    if (const auto* q = std::get_if<QuestionBlock>(&*it)) return q;
  return nullptr;
}

std::string_view to_string(ViolationCode code) {
  switch (code) {
    case ViolationCode::MissingUncertainty: return "MissingUncertainty";
    case ViolationCode::ForbiddenQuestionBlock: return "ForbiddenQuestionBlock";
    case ViolationCode::MissingQuestionBlock: return "MissingQuestionBlock";
    case ViolationCode::BadIndexing: return "BadIndexing";
    case ViolationCode::EmptyStep: return "EmptyStep";
    case ViolationCode::MissingFinalAnswer: return "MissingFinalAnswer";
    case ViolationCode::UnansweredQuestion: return "UnansweredQuestion";
    case ViolationCode::MalformedLine: return "MalformedLine";
    case ViolationCode::ForbiddenTerm: return "ForbiddenTerm";
    case ViolationCode::CoordinateLeak: return "CoordinateLeak";
  }
  return "Unknown";
}

std::optional<ViolationCode> parse_violation_code(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(ViolationCode::CoordinateLeak); ++i) {
    auto code = static_cast<ViolationCode>(i);
    if (to_string(code) == s) return code;
  }
  return std::nullopt;
}

bool is_structural(ViolationCode code) noexcept {
  return code != ViolationCode::ForbiddenTerm && code != ViolationCode::CoordinateLeak;
}

ParsedTrace parse_trace_detailed(std::string_view input, const ParseOptions& options) {
  ParsedTrace out;
  LineCursor cursor(text::split_lines(input));
  bool final_seen = false;

  while (cursor.next_nonblank()) {
    std::string_view line = cursor.current();
    std::size_t line_no = cursor.line_number();
    std::string_view rest;
    Step step;
    std::string note;

    if (final_seen) {
      out.warnings.push_back({line_no, "ignored text after final answer"});
      cursor.advance();
    } else if (parse_step_line(line, &step, &note)) {
      if (!note.empty()) out.warnings.push_back({line_no, note});
      out.trace.events.emplace_back(std::move(step));
      cursor.advance();
    } else if (is_question_header(line)) {
      cursor.advance();
      out.trace.events.emplace_back(parse_question_block(cursor, line_no));
    } else if (text::match_label(line, {"final", "answer"}, &rest)) {
      if (rest.empty()) {
        out.warnings.push_back({line_no, "empty final answer ignored"});
      } else {
        out.trace.final_answer = std::string(rest);
        final_seen = true;
      }
      cursor.advance();
    } else {
      out.warnings.push_back({line_no, "unrecognized line skipped"});
      cursor.advance();
    }
  }

  if (!options.allow_no_steps && out.trace.step_count() == 0) {
    fail(ErrorCode::NoStepsFound, "no line matches 'Step <k>: <text>'");
  }
  out.trace.variant = options.variant_hint ? *options.variant_hint : infer_variant(out.trace);
  return out;
}

ReasoningTrace parse_trace(std::string_view input, std::optional<TraceVariant> variant_hint) {
  return parse_trace_detailed(input, ParseOptions{variant_hint, false}).trace;
}

TraceVariant infer_variant(const ReasoningTrace& trace) {
  if (trace.question_count() > 0) return TraceVariant::WithQA;
  auto steps = trace.steps();
  bool all_scored = !steps.empty() && std::all_of(steps.begin(), steps.end(), [](const Step* s) {
    return s->uncertainty.has_value();
  });
  return all_scored ? TraceVariant::WithoutQA : TraceVariant::WithGT;
}

std::string render_step(const Step& step) {
  std::string out = "Step " + std::to_string(step.index) + ": " + step.text;
  if (step.uncertainty) out += " (Uncertainty: " + step.uncertainty->to_string() + ")";
  return out;
}

std::string render_question(const QuestionBlock& block) {
  std::string out = "Question:\n  Imagined Knowledge Needed: " + block.imagined_knowledge +
                    "\n  Question: " + block.question;
  if (block.answer) out += "\n  Answer: " + *block.answer;
  return out;
}

std::string render_event(const StepEvent& event) {
  if (const auto* s = std::get_if<Step>(&event)) return render_step(*s);
  return render_question(std::get<QuestionBlock>(event));
}

std::string render_trace(const ReasoningTrace& trace) {
  std::vector<std::string> lines;
  lines.reserve(trace.events.size() + 1);
  for (const auto& e : trace.events) lines.push_back(render_event(e));
  if (trace.final_answer) lines.push_back("Final Answer: " + *trace.final_answer);
  return text::join(lines, "\n");
}

std::vector<Violation> validate_trace(const ReasoningTrace& trace, TraceVariant variant) {
  std::vector<Violation> out;
  auto add = [&](ViolationCode code, std::size_t location, std::string message) {
    out.push_back({code, location, std::move(message)});
  };

  if (trace.step_count() == 0) add(ViolationCode::EmptyStep, 0, "trace has no reasoning steps");

  int expected = 1;
  std::size_t questions = 0;
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const std::size_t pos = i + 1;
    if (const auto* s = std::get_if<Step>(&trace.events[i])) {
      if (s->index != expected) {
        add(ViolationCode::BadIndexing, pos,
            "expected step " + std::to_string(expected) + ", found " + std::to_string(s->index));
      }
      expected = s->index + 1;
      if (text::trim(s->text).empty()) add(ViolationCode::EmptyStep, pos, "step text is empty");
      if (text::contains_newline(s->text)) add(ViolationCode::MalformedLine, pos, "step text spans lines");
      if (variant == TraceVariant::WithoutQA && !s->uncertainty) {
        add(ViolationCode::MissingUncertainty, pos,
            "step " + std::to_string(s->index) + " has no uncertainty score");
      }
    } else {
      const auto& q = std::get<QuestionBlock>(trace.events[i]);
      ++questions;
      if (variant != TraceVariant::WithQA) {
        add(ViolationCode::ForbiddenQuestionBlock, pos,
            "question block not allowed in " + std::string(to_string(variant)));
      }
      std::string_view question = text::trim(q.question);
      if (text::trim(q.imagined_knowledge).empty() || question.empty() || question.back() != '?' ||
          text::contains_newline(q.imagined_knowledge) || text::contains_newline(q.question) ||
          (q.answer && text::contains_newline(*q.answer))) {
        add(ViolationCode::MalformedLine, pos, "question block fields malformed");
      }
      if (variant == TraceVariant::WithQA && q.pending()) {
        add(ViolationCode::UnansweredQuestion, pos, "question block has no answer");
      }
    }
  }

  if (variant == TraceVariant::WithQA && questions == 0) {
    add(ViolationCode::MissingQuestionBlock, 0, "with-QA trace needs at least one question block");
  }
  if (!trace.final_answer || text::trim(*trace.final_answer).empty()) {
    add(ViolationCode::MissingFinalAnswer, trace.events.size() + 1, "final answer missing");
  } else if (text::contains_newline(*trace.final_answer)) {
    add(ViolationCode::MalformedLine, trace.events.size() + 1, "final answer spans lines");
  }

  std::stable_sort(out.begin(), out.end(),
                   [](const Violation& a, const Violation& b) { return a.location < b.location; });
  return out;
}

}  // namespace cor
