#include "cor/orchestrator.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>

#include "cor/digest.hpp"
#include "cor/errors.hpp"
#include "cor/serialize.hpp"
#include "cor/text.hpp"

namespace cor {

using nlohmann::json;

void InferencePolicy::validate() const {
  require(max_question_rounds >= 0, "max_question_rounds must be non-negative");
}

std::string_view to_string(SessionState state) {
  switch (state) {
    case SessionState::Stage1: return "stage1";
    case SessionState::QuestionPending: return "question_pending";
    case SessionState::Resuming: return "resuming";
    case SessionState::Finalized: return "finalized";
    case SessionState::Failed: return "failed";
  }
  return "unknown";
}

std::string_view to_string(FailureCause cause) {
  switch (cause) {
    case FailureCause::None: return "none";
    case FailureCause::Backend: return "backend";
    case FailureCause::RoundsExhausted: return "rounds_exhausted";
    case FailureCause::MissingFinalAnswer: return "missing_final_answer";
    case FailureCause::Unparseable: return "unparseable";
    case FailureCause::Answerer: return "answerer";
  }
  return "unknown";
}

std::string_view to_string(AnswererKind kind) {
  switch (kind) {
    case AnswererKind::ModelApi: return "api";
    case AnswererKind::Fixture: return "fixture";
    case AnswererKind::HumanCli: return "human";
  }
  return "unknown";
}

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

json events_json(const std::vector<StepEvent>& events) {
  ReasoningTrace t;
  t.events = events;
  return json(t).at("events");
}

json session_core(const InferenceSession& s, bool with_timings) {
  json turns = json::array();
  for (const auto& t : s.transcript) {
    json turn{{"stage", t.stage},
              {"prompt_digest", t.prompt_digest},
              {"raw_output", t.raw_output},
              {"events", events_json(t.events)},
              {"notes", t.notes}};
    if (with_timings) turn["latency_ms"] = t.latency_ms;
    if (t.answer) {
      json a{{"answerer_id", t.answer->answerer_id},
             {"question", t.answer->question},
             {"answer", t.answer->answer},
             {"prompt_digests", t.answer->prompt_digests},
             {"raw_outputs", t.answer->raw_outputs}};
      if (with_timings) a["latency_ms"] = t.answer->latency_ms;
      turn["answer"] = std::move(a);
    }
    turns.push_back(std::move(turn));
  }
  json j{{"sample_id", s.sample.id},
         {"vlm_id", s.vlm_id},
         {"state", to_string(s.state)},
         {"cause", to_string(s.cause)},
         {"error", s.error},
         {"rounds_used", s.rounds_used},
         {"transcript", std::move(turns)},
         {"violations", s.violations}};
  j["final_trace"] = s.final_trace ? json(*s.final_trace) : json(nullptr);
  if (s.final_trace) j["final_rendered"] = render_trace(*s.final_trace);
  return j;
}

}  // namespace

std::string InferenceSession::transcript_hash() const { return sha256_hex(session_core(*this, false).dump()); }

json session_json(const InferenceSession& session, bool with_timings) {
  json j = session_core(session, with_timings);
  j["transcript_hash"] = session.transcript_hash();
  return j;
}

// ---------------------------------------------------------------- answerers

std::string normalize_question(std::string_view question) { return text::lower(text::collapse_whitespace(question)); }

std::string question_hash(std::string_view question) { return sha256_hex(normalize_question(question)); }

std::optional<std::string> extract_json_answer(std::string_view text) {
  for (std::size_t open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
    std::size_t close = text.rfind('}');
    while (close != std::string_view::npos && close > open) {
      json j = json::parse(text.substr(open, close - open + 1), nullptr, false);
      if (!j.is_discarded()) {
        if (!j.is_object() || !j.contains("answer")) return std::nullopt;
        const json& a = j["answer"];
        std::string out;
        if (a.is_string()) out = std::string(text::trim(a.get<std::string>()));
        else if (a.is_number() || a.is_boolean()) out = a.dump();
        if (out.empty()) return std::nullopt;
        return out;
      }
      close = text.rfind('}', close - 1);
    }
  }
  return std::nullopt;
}

ModelApiAnswerer::ModelApiAnswerer(ChatBackend& backend, const PromptKit& prompts)
    : backend_(backend), prompts_(prompts) {}

void ModelApiAnswerer::answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy& policy,
                              AnswerExchange& exchange) {
  std::string context = sample.instruction;
  if (sample.question) context += "\nQuestion about the image: " + *sample.question;
  std::optional<std::string> image;
  if (policy.answerer_sees_image && backend_.image_capable() && !sample.image_ref.empty()) image = sample.image_ref;

  DecodingParams params = policy.params;
  params.response_format = ResponseFormat::Json;
  ChatRequest request = make_request(prompts_.render_answerer_prompt(block, context, image), params);
  for (int attempt = 1; attempt <= 2; ++attempt) {
    exchange.prompt_digests.push_back(request_digest(backend_.resolve(request)));
    ChatResponse response = backend_.complete(request);
    exchange.raw_outputs.push_back(response.text);
    if (auto a = extract_json_answer(response.text)) {
      exchange.answer = *a;
      return;
    }
    if (attempt == 1)
      append_followup(request, response.text,
                      "Reply with only a JSON object of the form {\"answer\": \"<your answer>\"}.");
  }
  fail(ErrorCode::AnswerParseError, "answerer '" + backend_.id() + "' did not return {\"answer\": ...}");
}

std::unique_ptr<FixtureAnswerer> FixtureAnswerer::from_json(const json& j) {
  auto out = std::make_unique<FixtureAnswerer>(j.value("id", "fixture-answerer"));
  if (!j.contains("answers") || !j["answers"].is_array()) throw SchemaError("answers", "expected an array");
  for (std::size_t i = 0; i < j["answers"].size(); ++i) {
    const json& e = j["answers"][i];
    std::string path = "answers[" + std::to_string(i) + "]";
    if (!e.contains("answer") || !e["answer"].is_string()) throw SchemaError(path + ".answer", "expected a string");
    std::string sample = e.value("sample_id", "*");
    if (e.contains("question_hash")) out->add_hash(sample, e["question_hash"].get<std::string>(), e["answer"]);
    else if (e.contains("question")) out->add(sample, e["question"].get<std::string>(), e["answer"]);
    else throw SchemaError(path + ".question", "missing");
  }
  return out;
}

std::unique_ptr<FixtureAnswerer> FixtureAnswerer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw SchemaError(path.string(), "not valid JSON");
  return from_json(j);
}

FixtureAnswerer& FixtureAnswerer::add(std::string sample_id, std::string_view question, std::string answer) {
  return add_hash(std::move(sample_id), question_hash(question), std::move(answer));
}

FixtureAnswerer& FixtureAnswerer::add_hash(std::string sample_id, std::string hash, std::string answer) {
  answers_[{std::move(sample_id), std::move(hash)}] = std::move(answer);
  return *this;
}

void FixtureAnswerer::answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy&,
                             AnswerExchange& exchange) {
  std::string hash = question_hash(block.question);
  for (const auto& key : {sample.id, std::string("*")}) {
    if (auto it = answers_.find({key, hash}); it != answers_.end()) {
      exchange.answer = it->second;
      return;
    }
  }
  fail(ErrorCode::FixtureMiss, "no fixture answer for sample " + sample.id + ", question hash " + hash);
}

void HumanCliAnswerer::answer(const QuestionBlock& block, const Sample& sample, const InferencePolicy&,
                              AnswerExchange& exchange) {
  out_ << "\n[" << sample.id << "] The model asks:\n"
       << "  Imagined knowledge needed: " << block.imagined_knowledge << "\n"
       << "  Question: " << block.question << "\n"
       << "Answer (empty line aborts)> " << std::flush;
  std::string line;
  if (!std::getline(in_, line)) fail(ErrorCode::HumanAborted, "input closed");
  std::string answer(text::trim(line));
  if (answer.empty()) fail(ErrorCode::HumanAborted, "empty answer");
  exchange.answer = answer;
}

QuestionBlock answer_question(const QuestionBlock& block, const Sample& sample, Answerer& answerer,
                              const InferencePolicy& policy, AnswerExchange* exchange) {
  require(block.pending(), "answer_question needs an unanswered question");
  AnswerExchange local;
  AnswerExchange& ex = exchange ? *exchange : local;
  ex.answerer_id = answerer.id();
  ex.question = block.question;
  auto start = std::chrono::steady_clock::now();
  answerer.answer(block, sample, policy, ex);
  ex.latency_ms = elapsed_ms(start);
  QuestionBlock out = block;
  // Answers are single-line fields in the trace grammar.
  out.answer = text::collapse_whitespace(ex.answer);
  if (out.answer->empty()) fail(ErrorCode::AnswerParseError, "answerer returned an empty answer");
  return out;
}

// ---------------------------------------------------------------- inference

PromptText stage_prompts(const InferenceSession& session, bool image_capable) {
  require(session.state == SessionState::Stage1 || session.state == SessionState::Resuming,
          "stage prompts exist only for stage 1 and resuming");
  const Sample& s = session.sample;
  PromptText p;
  p.system =
      "You are a visual assistant that reasons step by step. When you lack knowledge needed to continue, you ask "
      "for it with a question block instead of guessing.";
  if (image_capable && !s.image_ref.empty()) p.user_parts.push_back(PromptPart::image(s.image_ref));

  std::string user = "Task instruction: " + s.instruction + "\n";
  if (s.question) user += "Question: " + *s.question + "\n";
  user += "\n" + std::string(kReasoningDirective) + "\n\n";
  user +=
      "Write one reasoning step per line as \"Step k: <reasoning>\". If you need knowledge you do not have, stop "
      "and write a question block, then wait for the answer:\n"
      "Question:\n"
      "  Imagined Knowledge Needed: <knowledge>\n"
      "  Question: <question>\n"
      "Otherwise end with \"Final Answer: <answer>\".";
  if (session.state == SessionState::Resuming) {
    int last = 0;
    std::vector<std::string> lines;
    for (const auto& e : session.events) {
      if (const auto* st = std::get_if<Step>(&e)) last = st->index;
      lines.push_back(render_event(e));
    }
    user += "\n\nYour reasoning so far:\n" + text::join(lines, "\n") + "\n\n" + std::string(kContinueDirective) +
            " Continue with \"Step " + std::to_string(last + 1) + ":\".";
  }
  p.user_parts.push_back(PromptPart::text(std::move(user)));
  return p;
}

namespace {

// Accepts model output into the session context: completed steps are never
// rewritten, repeated steps are dropped, new steps are renumbered after the
// context, and output stops at the first question block.
struct Splice {
  std::vector<StepEvent> accepted;
  std::optional<std::string> final_answer;
  bool question = false;
};

Splice splice_output(const ReasoningTrace& parsed, const std::vector<StepEvent>& context, bool renumber,
                     std::vector<std::string>& notes) {
  Splice out;
  std::set<std::string> seen;
  int next = 1;
  for (const auto& e : context) {
    if (const auto* s = std::get_if<Step>(&e)) {
      seen.insert(text::collapse_whitespace(s->text));
      next = s->index + 1;
    }
  }
  std::size_t duplicates = 0;
  for (std::size_t i = 0; i < parsed.events.size(); ++i) {
    const auto& e = parsed.events[i];
    if (const auto* s = std::get_if<Step>(&e)) {
      if (seen.count(text::collapse_whitespace(s->text))) {
        ++duplicates;
        continue;
      }
      Step step = *s;
      if (renumber) step.index = next;
      next = step.index + 1;
      out.accepted.emplace_back(std::move(step));
      continue;
    }
    QuestionBlock block = std::get<QuestionBlock>(e);
    if (block.answer) {
      block.answer.reset();
      notes.push_back("self_answer_cleared");
    }
    out.accepted.emplace_back(std::move(block));
    out.question = true;
    if (i + 1 < parsed.events.size() || parsed.final_answer) notes.push_back("truncated_after_question");
    break;
  }
  if (duplicates) notes.push_back("duplicate_steps_dropped:" + std::to_string(duplicates));
  if (!out.question) out.final_answer = parsed.final_answer;
  return out;
}

ReasoningTrace assemble(const std::vector<StepEvent>& events, std::optional<std::string> final_answer) {
  ReasoningTrace t;
  t.events = events;
  t.final_answer = std::move(final_answer);
  t.variant = t.question_count() ? TraceVariant::WithQA : infer_variant(t);
  return t;
}

void finish(InferenceSession& s, const InferencePolicy& policy, std::optional<std::string> final_answer,
            FailureCause missing_cause) {
  s.final_trace = assemble(s.events, std::move(final_answer));
  s.violations = validate_trace(*s.final_trace, s.final_trace->variant);
  bool ok = s.final_trace->final_answer.has_value() || !policy.require_final_answer;
  s.state = ok ? SessionState::Finalized : SessionState::Failed;
  s.cause = ok ? FailureCause::None : missing_cause;
}

}  // namespace

InferenceSession run_inference(const Sample& sample, ChatBackend& vlm, Answerer& answerer,
                               const InferencePolicy& policy) {
  policy.validate();
  InferenceSession s;
  s.sample = sample;
  s.vlm_id = vlm.id();
  s.state = SessionState::Stage1;

  while (true) {
    const bool resuming = s.state == SessionState::Resuming;
    TurnRecord turn;
    turn.stage = resuming ? "resume" : "stage1";
    ChatRequest request = make_request(stage_prompts(s, vlm.image_capable()), policy.params);
    auto start = std::chrono::steady_clock::now();
    ChatResponse response;
    try {
      turn.prompt_digest = request_digest(vlm.resolve(request));
      response = vlm.complete(request);
    } catch (const Error& e) {
      turn.latency_ms = elapsed_ms(start);
      s.transcript.push_back(std::move(turn));
      s.state = SessionState::Failed;
      s.cause = FailureCause::Backend;
      s.error = e.what();
      s.final_trace = assemble(s.events, std::nullopt);
      return s;
    }
    turn.latency_ms = elapsed_ms(start);
    turn.raw_output = response.text;

    ParsedTrace parsed;
    try {
      ParseOptions options;
      options.variant_hint = TraceVariant::WithQA;
      options.allow_no_steps = resuming;
      parsed = parse_trace_detailed(response.text, options);
    } catch (const Error& e) {
      s.transcript.push_back(std::move(turn));
      s.state = SessionState::Failed;
      s.cause = FailureCause::Unparseable;
      s.error = e.what();
      s.final_trace = assemble(s.events, std::nullopt);
      return s;
    }

    Splice splice = splice_output(parsed.trace, s.events, resuming, turn.notes);
    turn.events = splice.accepted;
    s.events.insert(s.events.end(), splice.accepted.begin(), splice.accepted.end());

    if (!splice.question) {
      s.transcript.push_back(std::move(turn));
      finish(s, policy, splice.final_answer, FailureCause::MissingFinalAnswer);
      return s;
    }
    if (s.rounds_used >= policy.max_question_rounds) {
      turn.notes.push_back("question_beyond_budget");
      s.transcript.push_back(std::move(turn));
      finish(s, policy, std::nullopt, FailureCause::RoundsExhausted);
      return s;
    }

    s.state = SessionState::QuestionPending;
    auto& pending = std::get<QuestionBlock>(s.events.back());
    AnswerExchange exchange;
    try {
      pending = answer_question(pending, sample, answerer, policy, &exchange);
    } catch (const Error& e) {
      turn.answer = std::move(exchange);
      s.transcript.push_back(std::move(turn));
      s.state = SessionState::Failed;
      s.cause = FailureCause::Answerer;
      s.error = e.what();
      s.final_trace = assemble(s.events, std::nullopt);
      return s;
    }
    turn.answer = std::move(exchange);
    s.transcript.push_back(std::move(turn));
    ++s.rounds_used;
    s.state = SessionState::Resuming;
  }
}

SessionWriter::SessionWriter(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void SessionWriter::write(const InferenceSession& session) {
  std::string line = session_json(session).dump() + "\n";
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot append to " + path_.string());
  out << line;
}

}  // namespace cor
