#include "cor/cli.hpp"

#include <unistd.h>

#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "cor/config.hpp"
#include "cor/dataset.hpp"
#include "cor/digest.hpp"
#include "cor/errors.hpp"
#include "cor/evaluator.hpp"
#include "cor/orchestrator.hpp"
#include "cor/serialize.hpp"
#include "cor/text.hpp"
#include "cor/worker_pool.hpp"

namespace cor {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Emits results in index order as they complete, so JSONL artifacts are
// byte-stable for any worker width.
template <class T>
class OrderedSink {
 public:
  OrderedSink(std::size_t n, std::function<void(const T&)> emit) : slots_(n), emit_(std::move(emit)) {}
  void put(std::size_t i, T value) {
    std::lock_guard lock(mu_);
    slots_[i] = std::move(value);
    while (next_ < slots_.size() && slots_[next_]) {
      emit_(*slots_[next_]);
      slots_[next_].reset();
      ++next_;
    }
  }

 private:
  std::vector<std::optional<T>> slots_;
  std::function<void(const T&)> emit_;
  std::size_t next_ = 0;
  std::mutex mu_;
};

std::string compact_timestamp() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

json prompt_json(const PromptText& p) {
  json parts = json::array();
  for (const auto& part : p.user_parts)
    parts.push_back({{"kind", part.kind == PartKind::Image ? "image" : "text"}, {"value", part.value}});
  return {{"system", p.system}, {"user", parts}};
}

std::string violation_line(const Violation& v) {
  std::string s = "[" + std::string(to_string(v.code)) + "]";
  if (v.location) s += " at " + std::to_string(v.location);
  return s + ": " + v.message;
}

class Run {
 public:
  Run(Config config, std::optional<fs::path> dir, std::vector<std::string> argv, std::ostream& out,
      std::ostream& err, std::istream& in, std::shared_ptr<spdlog::logger> log)
      : config(std::move(config)), out(out), err(err), in(in), log(std::move(log)), argv_(std::move(argv)) {
    dir_ = dir ? *dir : this->config.runs_dir / (compact_timestamp() + "-" + this->config.digest());
  }

  // Creates the run directory with the config and a manifest on first use.
  const fs::path& dir() {
    if (!created_) {
      fs::create_directories(dir_);
      std::ofstream(dir_ / "config.json") << config.source.dump(2) << "\n";
      json manifest{{"argv", argv_},
                    {"config_digest", config.digest()},
                    {"started_at", utc_timestamp()},
                    {"template_version", make_prompt_kit(config).template_version()}};
      std::ofstream(dir_ / "manifest.json") << manifest.dump(2) << "\n";
      created_ = true;
      log->info("run directory {}", dir_.string());
    }
    return dir_;
  }

  fs::path output(const std::string& name) { return dir() / name; }

  Config config;
  std::ostream& out;
  std::ostream& err;
  std::istream& in;
  std::shared_ptr<spdlog::logger> log;

 private:
  fs::path dir_;
  bool created_ = false;
  std::vector<std::string> argv_;
};

std::map<std::string, Sample> index_samples(const std::vector<Sample>& samples) {
  std::map<std::string, Sample> out;
  for (const auto& s : samples) out[s.id] = s;
  return out;
}

std::vector<TraceVariant> parse_variants(const std::vector<std::string>& names) {
  std::vector<TraceVariant> out;
  for (const auto& raw : names) {
    std::stringstream names_in(raw);
    for (std::string name; std::getline(names_in, name, ',');) {
      auto v = parse_variant(text::trim(name));
      if (!v) throw UsageError("unknown variant \"" + std::string(name) + "\" (without_qa, with_gt, with_qa)");
      out.push_back(*v);
    }
  }
  return out;
}

void write_line(const fs::path& path, const json& j) {
  std::ofstream o(path, std::ios::app | std::ios::binary);
  if (!o) fail(ErrorCode::Io, "cannot append to " + path.string());
  o << j.dump() << "\n";
}

// ------------------------------------------------------------------ ingest

struct IngestArgs {
  std::vector<std::string> shims;
  std::string coco, vqa_questions, vqa_annotations, source, image_dir, image_pattern = "{id}.jpg", out;
};

int cmd_ingest(Run& run, const IngestArgs& a) {
  std::vector<json> shims;
  for (const auto& s : a.shims) shims.push_back(read_json_file(s));
  if (!a.coco.empty())
    shims.push_back(coco_captions_to_shim(read_json_file(a.coco), a.image_dir, a.source.empty() ? "coco_caption" : a.source));
  if (!a.vqa_questions.empty() || !a.vqa_annotations.empty()) {
    if (a.vqa_questions.empty() || a.vqa_annotations.empty() || a.source.empty())
      throw UsageError("--vqa-questions, --vqa-annotations and --source go together");
    shims.push_back(vqa_to_shim(read_json_file(a.vqa_questions), read_json_file(a.vqa_annotations), a.source,
                                a.image_dir, a.image_pattern));
  }
  if (shims.empty()) throw UsageError("ingest needs --shim, --coco or --vqa-questions/--vqa-annotations");

  std::vector<Sample> samples;
  std::size_t warnings = 0;
  for (std::size_t i = 0; i < shims.size(); ++i) {
    auto result = ingest_shim(shims[i]);
    for (const auto& w : result.warnings) run.log->warn("input {}: {}: {}", i + 1, w.path, w.message);
    warnings += result.warnings.size();
    samples.insert(samples.end(), result.samples.begin(), result.samples.end());
  }
  std::set<std::string> ids;
  for (const auto& s : samples)
    if (!ids.insert(s.id).second) fail(ErrorCode::SchemaError, "duplicate sample id " + s.id);

  if (a.coco.size() || a.vqa_questions.size()) {
    json converted = json::array();
    for (std::size_t i = a.shims.size(); i < shims.size(); ++i) converted.push_back(shims[i]);
    std::ofstream(run.output("shim.json")) << converted.dump(2) << "\n";
  }
  fs::path out = a.out.empty() ? run.output("samples.json") : fs::path(a.out);
  save_samples(out, samples);
  run.out << "ingested " << samples.size() << " samples (" << warnings << " warnings) -> " << out.string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------- build

struct BuildArgs {
  std::string samples;
  std::vector<std::string> variants{"without_qa,with_gt"};
  std::string backend = "builder";
  std::string image_mode;
  bool dry_run = false;
  std::size_t limit = 0;
};

ImageMode parse_image_mode(const std::string& s, ImageMode fallback) {
  if (s.empty()) return fallback;
  if (s == "auto") return ImageMode::Auto;
  if (s == "text") return ImageMode::TextOnly;
  if (s == "image") return ImageMode::Image;
  throw UsageError("--image-mode must be auto, text or image");
}

int cmd_build(Run& run, const BuildArgs& a) {
  auto samples = load_samples(a.samples);
  if (a.limit && samples.size() > a.limit) samples.resize(a.limit);
  auto variants = parse_variants(a.variants);
  PromptKit kit = make_prompt_kit(run.config);
  BuildContext ctx;
  ctx.prompts = &kit;
  ctx.lexical = run.config.lexical;
  ctx.params = run.config.decoding;
  ctx.image_mode = parse_image_mode(a.image_mode, run.config.image_mode);

  struct Job {
    const Sample* sample;
    TraceVariant variant;
  };
  std::vector<Job> jobs;
  for (const auto& s : samples)
    for (auto v : variants) jobs.push_back({&s, v});

  std::optional<ScopedNetworkBan> ban;
  if (a.dry_run) ban.emplace();
  auto backend = std::make_shared<CountingBackend>(
      make_backend(run.config, a.backend, {.require_api_key = !a.dry_run, .use_cache = !a.dry_run, .sleeper = {}}));

  if (a.dry_run) {
    fs::path out = run.output("prompts.jsonl");
    std::size_t rendered = 0, skipped = 0;
    for (const auto& job : jobs) {
      try {
        bool image = use_image_path(*job.sample, *backend, ctx.image_mode);
        PromptText p = kit.render_builder_prompt(*job.sample, job.variant, image);
        json line = prompt_json(p);
        line["sample_id"] = job.sample->id;
        line["variant"] = to_string(job.variant);
        line["request_digest"] = request_digest(backend->resolve(make_request(p, ctx.params)));
        write_line(out, line);
        ++rendered;
      } catch (const Error& e) {
        run.log->warn("{} {}: {}", job.sample->id, to_string(job.variant), e.what());
        ++skipped;
      }
    }
    run.out << "dry-run: " << rendered << " prompts rendered, " << skipped << " skipped -> " << out.string() << "\n";
    run.out << "backend_calls=" << backend->calls() << " network_attempts_blocked=" << NetworkGuard::blocked_attempts()
            << "\n";
    return kExitOk;
  }

  CorpusWriter writer(run.output("corpus.jsonl"), run.output("quarantine.jsonl"));
  std::atomic<std::size_t> skipped{0};
  OrderedSink<std::optional<TraceRecord>> sink(jobs.size(), [&](const std::optional<TraceRecord>& r) {
    if (r) writer.write(*r);
  });
  parallel_for(jobs.size(), run.config.workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    std::optional<TraceRecord> rec;
    try {
      rec = job.variant == TraceVariant::WithQA ? build_with_qa_fresh(*job.sample, *backend, ctx)
                                                : build_trace(*job.sample, job.variant, *backend, ctx);
      if (rec->quarantined) run.log->warn("{} {} quarantined", job.sample->id, to_string(job.variant));
    } catch (const Error& e) {
      run.log->error("{} {}: {}", job.sample->id, to_string(job.variant), e.what());
      ++skipped;
    }
    sink.put(i, std::move(rec));
  });
  run.out << "built " << writer.written() << " records, " << writer.quarantined() << " quarantined, " << skipped
          << " failed -> " << run.output("corpus.jsonl").string() << "\n";
  run.out << "backend_calls=" << backend->calls() << "\n";
  return jobs.size() && skipped == jobs.size() ? kExitError : kExitOk;
}

// --------------------------------------------------------------- derive-qa

struct DeriveArgs {
  std::vector<std::string> corpora;
  std::string samples;
  std::string backend = "builder";
  std::optional<double> rise, absolute;
  std::string mode;
  bool dry_run = false;
};

int cmd_derive(Run& run, const DeriveArgs& a) {
  SpikePolicy policy = run.config.spike;
  if (a.rise) policy.rise_threshold = *a.rise;
  if (a.absolute) policy.absolute_threshold = *a.absolute;
  if (a.mode == "first") policy.mode = SpikePolicy::Mode::FirstSpike;
  else if (a.mode == "all") policy.mode = SpikePolicy::Mode::AllSpikes;
  else if (!a.mode.empty()) throw UsageError("--mode must be first or all");
  policy.validate();

  std::vector<TraceRecord> records;
  for (const auto& c : a.corpora) {
    auto part = load_corpus(c);
    records.insert(records.end(), part.begin(), part.end());
  }
  records = dedup_records(std::move(records));
  std::erase_if(records, [](const TraceRecord& r) { return r.variant != TraceVariant::WithoutQA; });
  auto samples = index_samples(load_samples(a.samples));

  if (a.dry_run) {
    ScopedNetworkBan ban;
    std::size_t spiking = 0;
    for (const auto& r : records) {
      auto scores = r.trace.uncertainties();
      auto spike = scores.empty() ? std::nullopt : detect_spike(scores, policy);
      if (spike) ++spiking;
      run.out << r.sample_id << "\t" << (spike ? "spike@" + std::to_string(*spike) : "no_spike") << "\n";
    }
    run.out << "dry-run: " << spiking << " of " << records.size() << " traces spike, backend_calls=0\n";
    return kExitOk;
  }

  PromptKit kit = make_prompt_kit(run.config);
  BuildContext ctx;
  ctx.prompts = &kit;
  ctx.lexical = run.config.lexical;
  ctx.params = run.config.decoding;
  auto backend = std::make_shared<CountingBackend>(make_backend(run.config, a.backend));
  CorpusWriter writer(run.output("corpus.jsonl"), run.output("quarantine.jsonl"));
  std::atomic<std::size_t> no_spike{0}, failed{0};
  OrderedSink<std::optional<TraceRecord>> sink(records.size(), [&](const std::optional<TraceRecord>& r) {
    if (r) writer.write(*r);
  });
  parallel_for(records.size(), run.config.workers, [&](std::size_t i) {
    const TraceRecord& r = records[i];
    std::optional<TraceRecord> out;
    try {
      auto it = samples.find(r.sample_id);
      if (it == samples.end()) fail(ErrorCode::Precondition, "sample not found in --samples");
      auto outcome = derive_with_qa(r, it->second, policy, *backend, ctx);
      if (outcome.status == DeriveOutcome::Status::NoSpike) ++no_spike;
      else out = std::move(outcome.record);
    } catch (const Error& e) {
      run.log->error("{}: {}", r.sample_id, e.what());
      ++failed;
    }
    sink.put(i, std::move(out));
  });
  run.out << "derived " << writer.written() << " with_qa records, " << writer.quarantined() << " quarantined, "
          << no_spike << " without spike, " << failed << " failed -> " << run.output("corpus.jsonl").string() << "\n";
  run.out << "backend_calls=" << backend->calls() << "\n";
  return records.size() && failed == records.size() ? kExitError : kExitOk;
}

// ------------------------------------------------------------------- stats

struct StatsArgs {
  std::vector<std::string> corpora;
  std::string samples;
  std::string format = "table";
  bool all_events = false;
  std::string out;
};

int cmd_stats(Run& run, const StatsArgs& a) {
  std::vector<TraceRecord> records;
  for (const auto& c : a.corpora) {
    auto part = load_corpus(c);
    records.insert(records.end(), part.begin(), part.end());
  }
  records = dedup_records(std::move(records));
  std::optional<std::vector<Sample>> samples;
  if (!a.samples.empty()) samples = load_samples(a.samples);
  StatsTable table = corpus_stats(records, samples ? &*samples : nullptr);
  std::string text;
  if (a.format == "table") text = format_stats_table(table, a.all_events);
  else if (a.format == "csv") text = stats_csv(table);
  else if (a.format == "json") text = stats_json(table).dump(2) + "\n";
  else throw UsageError("--format must be table, csv or json");
  if (!a.out.empty()) {
    std::ofstream o(a.out, std::ios::binary);
    if (!o) fail(ErrorCode::Io, "cannot write " + a.out);
    o << text;
  }
  run.out << text;
  return kExitOk;
}

// ---------------------------------------------------------------- validate

struct ValidateArgs {
  std::vector<std::string> corpora;
  bool lexical = false;
};

int cmd_validate(Run& run, const ValidateArgs& a) {
  std::size_t total = 0, invalid = 0;
  for (const auto& c : a.corpora) {
    for (const auto& r : load_corpus(c)) {
      ++total;
      auto violations = validate_trace(r.trace, r.variant);
      if (a.lexical) {
        auto lex = lexical_guard(render_trace(r.trace), run.config.lexical);
        violations.insert(violations.end(), lex.begin(), lex.end());
      }
      if (violations.empty()) continue;
      ++invalid;
      for (const auto& v : violations)
        run.out << r.sample_id << "\t" << to_string(r.variant) << "\t" << violation_line(v) << "\n";
    }
  }
  run.out << "validated " << total << " records: " << invalid << " invalid\n";
  return invalid ? kExitError : kExitOk;
}

// ------------------------------------------------------------------- infer

struct InferArgs {
  std::string samples;
  std::string answerer = "fixture";
  std::string answers;
  std::string backend = "vlm";
  std::string answerer_backend = "answerer";
  std::optional<int> max_rounds;
  bool dry_run = false;
  std::size_t limit = 0;
};

int cmd_infer(Run& run, const InferArgs& a) {
  auto samples = load_samples(a.samples);
  if (a.limit && samples.size() > a.limit) samples.resize(a.limit);
  InferencePolicy policy = run.config.inference;
  if (a.max_rounds) policy.max_question_rounds = *a.max_rounds;
  policy.validate();
  PromptKit kit = make_prompt_kit(run.config);

  if (a.dry_run) {
    ScopedNetworkBan ban;
    auto vlm = std::make_shared<CountingBackend>(
        make_backend(run.config, a.backend, {.require_api_key = false, .use_cache = false, .sleeper = {}}));
    fs::path out = run.output("prompts.jsonl");
    for (const auto& s : samples) {
      InferenceSession session;
      session.sample = s;
      PromptText p = stage_prompts(session, vlm->image_capable());
      json line = prompt_json(p);
      line["sample_id"] = s.id;
      line["stage"] = "stage1";
      line["request_digest"] = request_digest(vlm->resolve(make_request(p, policy.params)));
      write_line(out, line);
    }
    run.out << "dry-run: " << samples.size() << " stage-1 prompts rendered -> " << out.string() << "\n";
    run.out << "backend_calls=" << vlm->calls() << " network_attempts_blocked=" << NetworkGuard::blocked_attempts()
            << "\n";
    return kExitOk;
  }

  std::size_t width = run.config.workers;
  std::unique_ptr<Answerer> answerer;
  std::shared_ptr<ChatBackend> answer_backend;
  if (a.answerer == "fixture") {
    fs::path path = !a.answers.empty() ? fs::path(a.answers)
                    : run.config.answer_fixture ? *run.config.answer_fixture
                                                : throw UsageError("--answerer fixture needs --answers or config answer_fixture");
    answerer = FixtureAnswerer::load(path);
  } else if (a.answerer == "api") {
    answer_backend = make_backend(run.config, a.answerer_backend);
    answerer = std::make_unique<ModelApiAnswerer>(*answer_backend, kit);
  } else if (a.answerer == "human") {
    if (&run.in == &std::cin && !::isatty(STDIN_FILENO))
      throw UsageError("--answerer human needs an interactive terminal");
    answerer = std::make_unique<HumanCliAnswerer>(run.in, run.err);
    width = 1;
  } else {
    throw UsageError("--answerer must be human, fixture or api");
  }
  auto vlm = std::make_shared<CountingBackend>(make_backend(run.config, a.backend));

  fs::path out = run.output("sessions.jsonl");
  SessionWriter writer(out);
  std::vector<std::string> hashes(samples.size());
  std::map<std::string, std::size_t> by_state;
  OrderedSink<InferenceSession> sink(samples.size(), [&](const InferenceSession& s) {
    writer.write(s);
    ++by_state[std::string(to_string(s.state))];
    run.out << s.sample.id << "\t" << to_string(s.state) << "\t" << to_string(s.cause) << "\t"
            << s.transcript_hash() << "\n";
    if (s.state == SessionState::Failed) run.log->warn("{} failed ({}): {}", s.sample.id, to_string(s.cause), s.error);
  });
  std::mutex answer_mu;  // answerers are not required to be thread safe
  struct LockedAnswerer : Answerer {
    Answerer& inner;
    std::mutex& mu;
    LockedAnswerer(Answerer& a, std::mutex& m) : inner(a), mu(m) {}
    AnswererKind kind() const override { return inner.kind(); }
    std::string id() const override { return inner.id(); }
    void answer(const QuestionBlock& b, const Sample& s, const InferencePolicy& p, AnswerExchange& e) override {
      std::lock_guard lock(mu);
      inner.answer(b, s, p, e);
    }
  } locked(*answerer, answer_mu);
  parallel_for(samples.size(), width, [&](std::size_t i) {
    InferenceSession s = run_inference(samples[i], *vlm, locked, policy);
    hashes[i] = s.transcript_hash();
    sink.put(i, std::move(s));
  });
  std::string joined;
  for (const auto& h : hashes) joined += h + "\n";
  run.out << "transcript_hash " << sha256_hex(joined) << "\n";
  run.log->info("{} sessions: {} finalized, {} failed; backend_calls={}", samples.size(), by_state["finalized"],
                by_state["failed"], vlm->calls());
  return kExitOk;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<std::string> sessions;
  std::vector<std::string> results;
  std::string samples;
  std::string judge = "oracle";
  std::string backend = "judge";
  std::string format = "table";
  int decimals = 3;
};

struct SessionFile {
  std::string label;
  fs::path path;
};

SessionFile parse_session_arg(const std::string& arg) {
  auto eq = arg.find('=');
  if (eq != std::string::npos) return {arg.substr(0, eq), arg.substr(eq + 1)};
  return {fs::path(arg).parent_path().filename().string().empty() ? fs::path(arg).stem().string()
                                                                  : fs::path(arg).parent_path().filename().string(),
          arg};
}

int cmd_eval(Run& run, const EvalArgs& a) {
  if (a.sessions.empty() && a.results.empty()) throw UsageError("eval needs --sessions or --results");
  std::vector<JudgeResult> results;
  for (const auto& r : a.results) {
    auto part = load_judge_results(r);
    results.insert(results.end(), part.begin(), part.end());
  }

  if (!a.sessions.empty()) {
    if (a.samples.empty()) throw UsageError("--sessions needs --samples for gold answers");
    if (a.judge != "oracle" && a.judge != "llm") throw UsageError("--judge must be oracle or llm");
    auto samples = index_samples(load_samples(a.samples));
    struct Item {
      std::string label;
      const Sample* sample;
      std::optional<ReasoningTrace> trace;
    };
    std::vector<Item> items;
    for (const auto& arg : a.sessions) {
      SessionFile f = parse_session_arg(arg);
      std::ifstream in(f.path, std::ios::binary);
      if (!in) fail(ErrorCode::Io, "cannot read " + f.path.string());
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("sample_id"))
          throw SchemaError(f.path.string() + ":" + std::to_string(line_no), "not a session record");
        auto it = samples.find(j["sample_id"].get<std::string>());
        if (it == samples.end()) {
          run.log->warn("{}: sample {} not in --samples", f.path.string(), j["sample_id"].get<std::string>());
          continue;
        }
        Item item{f.label, &it->second, std::nullopt};
        if (j.contains("final_trace") && !j["final_trace"].is_null())
          item.trace = j["final_trace"].get<ReasoningTrace>();
        items.push_back(std::move(item));
      }
    }

    PromptKit kit = make_prompt_kit(run.config);
    std::shared_ptr<ChatBackend> judge_backend;
    if (a.judge == "llm") judge_backend = make_backend(run.config, a.backend);
    std::vector<std::optional<JudgeResult>> judged(items.size());
    parallel_for(items.size(), a.judge == "llm" ? run.config.workers : 1, [&](std::size_t i) {
      const Item& item = items[i];
      try {
        if (!item.trace) {
          // Failed sessions carry no answer and score as incorrect.
          JudgeResult r = oracle_judge(*item.sample, ReasoningTrace{}, item.label);
          r.judge_kind = a.judge == "llm" ? JudgeKind::LlmJudge : JudgeKind::OracleJudge;
          r.raw_judge_output = "session has no final trace";
          judged[i] = r;
        } else if (a.judge == "llm") {
          judged[i] = judge(*item.sample, *item.trace, *judge_backend, kit, {.system_label = item.label});
        } else {
          judged[i] = oracle_judge(*item.sample, *item.trace, item.label);
        }
      } catch (const Error& e) {
        run.log->error("{} {}: {}", item.label, item.sample->id, e.what());
      }
    });
    std::vector<JudgeResult> fresh;
    for (auto& j : judged)
      if (j) fresh.push_back(std::move(*j));
    if (fresh.size() < items.size()) run.log->warn("{} of {} items unscored", items.size() - fresh.size(), items.size());
    append_judge_results(run.output("judge_results.jsonl"), fresh);
    results.insert(results.end(), fresh.begin(), fresh.end());
  }

  ScoreTable table = aggregate(results);
  std::string text;
  if (a.format == "table") text = format_score_table(table, a.decimals);
  else if (a.format == "csv") text = score_csv(table);
  else if (a.format == "json") text = json(table).dump(2) + "\n";
  else throw UsageError("--format must be table, csv or json");
  if (!a.sessions.empty()) {
    std::ofstream(run.output("scores.csv")) << score_csv(table);
    std::ofstream(run.output("scores.json")) << json(table).dump(2) << "\n";
  }
  run.out << text;
  return kExitOk;
}

// ------------------------------------------------------------------- cache

int cmd_cache_ls(Run& run, bool as_json) {
  ResponseCache cache(run.config.cache_dir);
  auto entries = cache.list();
  if (as_json) {
    json arr = json::array();
    for (const auto& e : entries) arr.push_back({{"key", e.key}, {"stored_at", e.stored_at}, {"response", e.response}});
    run.out << arr.dump(2) << "\n";
    return kExitOk;
  }
  for (const auto& e : entries)
    run.out << e.key << "\t" << e.stored_at << "\t" << e.response.backend_id << "\t" << e.response.text.size()
            << " chars\n";
  run.out << entries.size() << " entries in " << cache.dir().string() << "\n";
  return kExitOk;
}

int cmd_cache_gc(Run& run, std::optional<long> older_than_hours) {
  ResponseCache cache(run.config.cache_dir);
  std::optional<std::chrono::hours> age;
  if (older_than_hours) age = std::chrono::hours(*older_than_hours);
  run.out << "removed " << cache.gc(age) << " entries\n";
  return kExitOk;
}

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err, const std::string& level) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto log = std::make_shared<spdlog::logger>("cor", sink);
  log->set_pattern("[%l] %v");
  auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown --log-level " + level);
  log->set_level(lvl);
  return log;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err, std::istream& in) {
  CLI::App app{"Chain-of-Reasoning dataset and inference toolkit", "cor"};
  app.require_subcommand(1);
  std::string config_path, run_dir, log_level = "info";
  std::optional<std::size_t> workers;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--run-dir", run_dir, "output directory (default: <runs>/<timestamp>-<config digest>)");
  app.add_option("--workers", workers, "worker pool width")->check(CLI::PositiveNumber);
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "normalize raw annotations into samples");
  c_ingest->add_option("--shim", ingest.shims, "annotation shim JSON (repeatable)");
  c_ingest->add_option("--coco", ingest.coco, "COCO captions JSON");
  c_ingest->add_option("--vqa-questions", ingest.vqa_questions, "VQA questions JSON");
  c_ingest->add_option("--vqa-annotations", ingest.vqa_annotations, "VQA annotations JSON");
  c_ingest->add_option("--source", ingest.source, "source dataset tag");
  c_ingest->add_option("--image-dir", ingest.image_dir, "directory prefixed to image files");
  c_ingest->add_option("--image-pattern", ingest.image_pattern, "VQA image file pattern with {id}");
  c_ingest->add_option("--out", ingest.out, "samples output (default: <run>/samples.json)");

  BuildArgs build;
  auto* c_build = app.add_subcommand("build", "generate trace records for samples");
  c_build->add_option("--samples", build.samples, "samples JSON or JSONL")->required();
  c_build->add_option("--variants", build.variants, "comma-separated: without_qa, with_gt, with_qa");
  c_build->add_option("--backend", build.backend, "backend name or role");
  c_build->add_option("--image-mode", build.image_mode, "auto, text or image");
  c_build->add_option("--limit", build.limit, "process only the first N samples");
  c_build->add_flag("--dry-run", build.dry_run, "render prompts without backend calls");

  DeriveArgs derive;
  auto* c_derive = app.add_subcommand("derive-qa", "insert question blocks at uncertainty spikes");
  c_derive->add_option("--corpus", derive.corpora, "corpus JSONL with without_qa records")->required();
  c_derive->add_option("--samples", derive.samples, "samples JSON or JSONL")->required();
  c_derive->add_option("--backend", derive.backend, "backend name or role");
  c_derive->add_option("--rise", derive.rise, "rise threshold");
  c_derive->add_option("--abs", derive.absolute, "absolute threshold");
  c_derive->add_option("--mode", derive.mode, "first or all");
  c_derive->add_flag("--dry-run", derive.dry_run, "report spikes without backend calls");

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "per-source corpus statistics");
  c_stats->add_option("--corpus", stats.corpora, "corpus JSONL (repeatable)")->required();
  c_stats->add_option("--samples", stats.samples, "samples for per-source counts");
  c_stats->add_option("--format", stats.format, "table, csv or json");
  c_stats->add_flag("--all-events", stats.all_events, "count question blocks as events");
  c_stats->add_option("--out", stats.out, "also write to file");

  ValidateArgs validate;
  auto* c_validate = app.add_subcommand("validate", "re-validate corpus records");
  c_validate->add_option("--corpus", validate.corpora, "corpus JSONL (repeatable)")->required();
  c_validate->add_flag("--lexical", validate.lexical, "also run the lexical guard");

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "two-stage inference over samples");
  c_infer->add_option("--samples", infer.samples, "samples JSON or JSONL")->required();
  c_infer->add_option("--answerer", infer.answerer, "human, fixture or api");
  c_infer->add_option("--answers", infer.answers, "fixture answers JSON");
  c_infer->add_option("--backend", infer.backend, "reasoning model backend name or role");
  c_infer->add_option("--answerer-backend", infer.answerer_backend, "backend for --answerer api");
  c_infer->add_option("--max-rounds", infer.max_rounds, "question rounds per session");
  c_infer->add_option("--limit", infer.limit, "process only the first N samples");
  c_infer->add_flag("--dry-run", infer.dry_run, "render stage-1 prompts without backend calls");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "judge sessions and aggregate scores");
  c_eval->add_option("--sessions", eval.sessions, "[LABEL=]sessions.jsonl (repeatable)");
  c_eval->add_option("--results", eval.results, "existing judge results JSONL to include");
  c_eval->add_option("--samples", eval.samples, "samples with gold answers");
  c_eval->add_option("--judge", eval.judge, "oracle or llm");
  c_eval->add_option("--backend", eval.backend, "judge backend name or role");
  c_eval->add_option("--format", eval.format, "table, csv or json");
  c_eval->add_option("--decimals", eval.decimals, "table precision");

  auto* c_cache = app.add_subcommand("cache", "inspect the response cache");
  c_cache->require_subcommand(1);
  bool ls_json = false;
  std::optional<long> older_than;
  auto* c_ls = c_cache->add_subcommand("ls", "list entries");
  c_ls->add_flag("--json", ls_json, "print entries as JSON");
  auto* c_gc = c_cache->add_subcommand("gc", "remove unreadable or old entries");
  c_gc->add_option("--older-than-hours", older_than, "also remove entries older than this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  std::shared_ptr<spdlog::logger> log;
  try {
    log = make_logger(err, log_level);
    Config config = config_path.empty() ? default_config() : load_config(config_path);
    if (workers) config.workers = *workers;
    std::vector<std::string> args(argv, argv + argc);
    Run run(std::move(config), run_dir.empty() ? std::nullopt : std::optional<fs::path>(run_dir), args, out, err,
            in, log);
    if (c_ingest->parsed()) return cmd_ingest(run, ingest);
    if (c_build->parsed()) return cmd_build(run, build);
    if (c_derive->parsed()) return cmd_derive(run, derive);
    if (c_stats->parsed()) return cmd_stats(run, stats);
    if (c_validate->parsed()) return cmd_validate(run, validate);
    if (c_infer->parsed()) return cmd_infer(run, infer);
    if (c_eval->parsed()) return cmd_eval(run, eval);
    if (c_ls->parsed()) return cmd_cache_ls(run, ls_json);
    if (c_gc->parsed()) return cmd_cache_gc(run, older_than);
    throw UsageError("no subcommand");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    if (log) log->error("{}", e.what());
    else err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

int cli_dispatch(int argc, const char* const* argv) { return cli_dispatch(argc, argv, std::cout, std::cerr, std::cin); }

}  // namespace cor
