#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cor/dataset.hpp"
#include "cor/errors.hpp"
#include "cor/serialize.hpp"
#include "cor/text.hpp"

namespace cor {

using nlohmann::json;

// ------------------------------------------------------------------ records

void to_json(json& j, const TraceRecord& r) {
  j = json{{"sample_id", r.sample_id},
           {"source_dataset", r.source_dataset},
           {"image_ref", r.image_ref},
           {"variant", to_string(r.variant)},
           {"trace", r.trace},
           {"rendered", render_trace(r.trace)},
           {"raw_text", r.raw_text},
           {"violations", r.violations},
           {"guard_violations", r.guard_violations},
           {"template_version", r.template_version},
           {"backend_id", r.backend_id},
           {"created_at", r.created_at},
           {"attempts", r.attempts},
           {"quarantined", r.quarantined},
           {"derived", r.derived}};
  if (r.spike_index) j["spike_index"] = *r.spike_index;
}

void from_json(const json& j, TraceRecord& r) {
  r.sample_id = j.at("sample_id").get<std::string>();
  r.source_dataset = j.value("source_dataset", "");
  r.image_ref = j.value("image_ref", "");
  auto variant = parse_variant(j.at("variant").get<std::string>());
  require(variant.has_value(), "unknown variant in record " + r.sample_id);
  r.variant = *variant;
  if (j.contains("trace")) r.trace = j["trace"].get<ReasoningTrace>();
  else r.trace = parse_trace(j.at("rendered").get<std::string>(), r.variant);
  r.raw_text = j.value("raw_text", "");
  r.violations = j.value("violations", std::vector<Violation>{});
  r.guard_violations = j.value("guard_violations", std::vector<Violation>{});
  r.template_version = j.value("template_version", "");
  r.backend_id = j.value("backend_id", "");
  r.created_at = j.value("created_at", "");
  r.attempts = j.value("attempts", 1);
  r.quarantined = j.value("quarantined", false);
  r.derived = j.value("derived", false);
  r.spike_index.reset();
  if (j.contains("spike_index")) r.spike_index = j["spike_index"].get<int>();
}

CorpusWriter::CorpusWriter(std::filesystem::path corpus, std::filesystem::path quarantine)
    : corpus_(std::move(corpus)), quarantine_(std::move(quarantine)) {
  for (const auto& p : {corpus_, quarantine_})
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

void CorpusWriter::write(const TraceRecord& record) {
  std::string line = json(record).dump() + "\n";
  std::lock_guard lock(mu_);
  const auto& path = record.quarantined ? quarantine_ : corpus_;
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot append to " + path.string());
  out << line;
  out.flush();
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
  ++(record.quarantined ? quarantined_ : written_);
}

std::size_t CorpusWriter::written() const {
  std::lock_guard lock(mu_);
  return written_;
}

std::size_t CorpusWriter::quarantined() const {
  std::lock_guard lock(mu_);
  return quarantined_;
}

std::vector<TraceRecord> dedup_records(std::vector<TraceRecord> records) {
  std::map<std::pair<std::string, TraceVariant>, std::size_t> slot;
  std::vector<TraceRecord> out;
  for (auto& r : records) {
    if (r.quarantined) continue;
    auto [it, inserted] = slot.emplace(r.key(), out.size());
    if (inserted) out.push_back(std::move(r));
    else out[it->second] = std::move(r);
  }
  return out;
}

std::vector<TraceRecord> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::vector<TraceRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      records.push_back(json::parse(line).get<TraceRecord>());
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no), e.what());
    }
  }
  return dedup_records(std::move(records));
}

// --------------------------------------------------------------- generation

bool use_image_path(const Sample& sample, const ChatBackend& backend, ImageMode mode) {
  if (!backend.image_capable() || sample.image_ref.empty()) return false;
  switch (mode) {
    case ImageMode::TextOnly: return false;
    case ImageMode::Image: return true;
    case ImageMode::Auto: return !sample.has_scene_text();
  }
  return false;
}

std::string repair_instruction(const std::vector<Violation>& violations) {
  std::string out = "Your previous answer did not follow the required output format:\n";
  for (const auto& v : violations) {
    out += "- [" + std::string(to_string(v.code)) + "]";
    if (v.location) out += " at item " + std::to_string(v.location);
    out += ": " + v.message + "\n";
  }
  out += "Rewrite your complete answer so that it follows the required format exactly. Output only the formatted answer.";
  return out;
}

namespace {

struct Attempt {
  std::optional<ReasoningTrace> trace;
  std::vector<Violation> violations;
};

Violation unparseable(const Error& e) { return {ViolationCode::MalformedLine, 0, e.what()}; }

std::vector<Violation> structural_only(std::vector<Violation> vs) {
  std::erase_if(vs, [](const Violation& v) { return !is_structural(v.code); });
  return vs;
}

template <typename Evaluate>
TraceRecord generate(const Sample& sample, TraceVariant variant, ChatBackend& backend, const BuildContext& ctx,
                     const PromptText& prompt, Evaluate evaluate) {
  ChatRequest request = make_request(prompt, ctx.params);
  TraceRecord rec;
  rec.sample_id = sample.id;
  rec.source_dataset = sample.source_dataset;
  rec.image_ref = sample.image_ref;
  rec.variant = variant;
  rec.template_version = ctx.prompts->template_version();
  rec.backend_id = backend.id();

  for (int attempt = 1; attempt <= 2; ++attempt) {
    ChatResponse response = backend.complete(request);
    Attempt a = evaluate(response.text);
    rec.attempts = attempt;
    rec.raw_text = response.text;
    rec.violations = structural_only(a.violations);
    rec.trace = a.trace ? *a.trace : ReasoningTrace{variant, {}, std::nullopt};
    if (rec.violations.empty() && a.trace) break;
    if (attempt == 1) append_followup(request, response.text, repair_instruction(rec.violations));
  }
  rec.quarantined = !rec.violations.empty();
  rec.guard_violations = lexical_guard(rec.raw_text, ctx.lexical);
  rec.created_at = ctx.clock ? ctx.clock() : utc_timestamp();
  return rec;
}

Attempt evaluate_full(std::string_view raw, TraceVariant variant) {
  Attempt a;
  try {
    ParseOptions options;
    options.variant_hint = variant;
    a.trace = parse_trace_detailed(raw, options).trace;
    a.violations = validate_trace(*a.trace, variant);
  } catch (const Error& e) {
    a.violations = {unparseable(e)};
  }
  return a;
}

}  // namespace

TraceRecord build_trace(const Sample& sample, TraceVariant variant, ChatBackend& backend, const BuildContext& ctx) {
  require(ctx.prompts != nullptr, "build context has no prompt kit");
  require(variant != TraceVariant::WithQA, "with-QA traces are derived from without-QA traces");
  PromptText prompt =
      ctx.prompts->render_builder_prompt(sample, variant, use_image_path(sample, backend, ctx.image_mode));
  return generate(sample, variant, backend, ctx, prompt,
                  [variant](std::string_view raw) { return evaluate_full(raw, variant); });
}

TraceRecord build_with_qa_fresh(const Sample& sample, ChatBackend& backend, const BuildContext& ctx) {
  require(ctx.prompts != nullptr, "build context has no prompt kit");
  PromptText prompt = ctx.prompts->render_builder_prompt(sample, TraceVariant::WithQA,
                                                         use_image_path(sample, backend, ctx.image_mode));
  return generate(sample, TraceVariant::WithQA, backend, ctx, prompt,
                  [](std::string_view raw) { return evaluate_full(raw, TraceVariant::WithQA); });
}

// ------------------------------------------------------------------- spikes

void SpikePolicy::validate() const {
  auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(in_range(rise_threshold), "rise_threshold must lie in [0, 1]");
  require(in_range(absolute_threshold), "absolute_threshold must lie in [0, 1]");
}

namespace {

// Scores are exact hundredths, so a threshold t fires at ceil(100 t).
int threshold_hundredths(double t) { return static_cast<int>(std::ceil(t * 100.0 - 1e-9)); }

template <typename OnSpike>
void scan_spikes(std::span<const UncertaintyScore> scores, const SpikePolicy& policy, OnSpike on_spike) {
  policy.validate();
  require(!scores.empty(), "detect_spike needs at least one score");
  const int rise = threshold_hundredths(policy.rise_threshold);
  const int absolute = threshold_hundredths(policy.absolute_threshold);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int h = scores[i].hundredths();
    bool fires = h >= absolute || (i > 0 && h - scores[i - 1].hundredths() >= rise);
    if (fires && !on_spike(i + 1)) return;
  }
}

}  // namespace

std::optional<std::size_t> detect_spike(std::span<const UncertaintyScore> scores, const SpikePolicy& policy) {
  std::optional<std::size_t> first;
  scan_spikes(scores, policy, [&](std::size_t i) {
    first = i;
    return false;
  });
  return first;
}

std::vector<std::size_t> detect_spikes(std::span<const UncertaintyScore> scores, const SpikePolicy& policy) {
  std::vector<std::size_t> all;
  scan_spikes(scores, policy, [&](std::size_t i) {
    all.push_back(i);
    return true;
  });
  return all;
}

// ------------------------------------------------------------------- derive

SpliceResult splice_continuation(const ReasoningTrace& original, std::size_t spike, std::string_view text) {
  SpliceResult result;
  auto steps = original.steps();
  require(spike >= 1 && spike <= steps.size(), "spike index out of range");

  ParsedTrace parsed;
  try {
    ParseOptions options;
    options.variant_hint = TraceVariant::WithQA;
    options.allow_no_steps = true;
    parsed = parse_trace_detailed(text, options);
  } catch (const Error& e) {
    result.violations.push_back(unparseable(e));
    return result;
  }

  std::set<std::string> prefix_texts;
  for (std::size_t i = 0; i + 1 < spike; ++i) prefix_texts.insert(text::collapse_whitespace(steps[i]->text));
  std::vector<StepEvent> continuation;
  for (auto& e : parsed.trace.events) {
    if (const auto* s = std::get_if<Step>(&e); s && prefix_texts.count(text::collapse_whitespace(s->text))) continue;
    continuation.push_back(std::move(e));
  }

  auto add = [&](ViolationCode code, std::string message) { result.violations.push_back({code, 0, std::move(message)}); };
  if (continuation.empty() || !is_question(continuation.front()))
    add(ViolationCode::MissingQuestionBlock, "the continuation must open with a question block");
  std::size_t blocks = 0, new_steps = 0;
  for (const auto& e : continuation) (is_question(e) ? blocks : new_steps) += 1;
  if (blocks > 1) add(ViolationCode::MalformedLine, "exactly one question block expected, found " + std::to_string(blocks));
  std::size_t needed = steps.size() - spike + 1;
  if (new_steps < needed)
    add(ViolationCode::MalformedLine, "the continuation has " + std::to_string(new_steps) + " steps, at least " +
                                          std::to_string(needed) + " required");
  if (!parsed.trace.final_answer) add(ViolationCode::MissingFinalAnswer, "the continuation has no final answer");
  if (!result.violations.empty()) return result;

  ReasoningTrace out;
  out.variant = TraceVariant::WithQA;
  for (std::size_t i = 0; i + 1 < spike; ++i) out.events.emplace_back(*steps[i]);
  int next = static_cast<int>(spike);
  for (auto& e : continuation) {
    if (auto* s = std::get_if<Step>(&e)) s->index = next++;
    out.events.push_back(std::move(e));
  }
  out.final_answer = parsed.trace.final_answer;
  result.violations = structural_only(validate_trace(out, TraceVariant::WithQA));
  if (result.violations.empty()) result.trace = std::move(out);
  return result;
}

DeriveOutcome derive_with_qa(const TraceRecord& record, const Sample& sample, const SpikePolicy& policy,
                             ChatBackend& backend, const BuildContext& ctx) {
  require(ctx.prompts != nullptr, "build context has no prompt kit");
  require(record.variant == TraceVariant::WithoutQA, "derive_with_qa needs a without-QA record");
  require(validate_trace(record.trace, TraceVariant::WithoutQA).empty(),
          "record " + record.sample_id + " does not validate as without-QA");

  DeriveOutcome outcome;
  auto scores = record.trace.uncertainties();
  outcome.spikes = detect_spikes(scores, policy);
  if (outcome.spikes.empty()) return outcome;
  outcome.status = DeriveOutcome::Status::Derived;
  std::size_t spike = outcome.spikes.front();

  auto steps = record.trace.steps();
  std::vector<std::string> prefix, remaining;
  for (std::size_t i = 0; i < steps.size(); ++i) (i + 1 < spike ? prefix : remaining).push_back(render_step(*steps[i]));
  QaDerivation derivation{text::join(prefix, "\n"), text::join(remaining, "\n"), static_cast<int>(spike)};
  PromptText prompt = ctx.prompts->render_builder_prompt(sample, TraceVariant::WithQA,
                                                         use_image_path(sample, backend, ctx.image_mode), &derivation);

  const ReasoningTrace& original = record.trace;
  outcome.record = generate(sample, TraceVariant::WithQA, backend, ctx, prompt, [&](std::string_view raw) {
    SpliceResult s = splice_continuation(original, spike, raw);
    return Attempt{std::move(s.trace), std::move(s.violations)};
  });
  outcome.record.derived = true;
  outcome.record.spike_index = static_cast<int>(spike);
  return outcome;
}

}  // namespace cor
