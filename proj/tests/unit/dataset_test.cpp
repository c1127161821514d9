#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cor/dataset.hpp"
#include "cor/errors.hpp"
#include "cor/serialize.hpp"
#include "support/generators.hpp"

using namespace cor;
using nlohmann::json;

namespace {

const PromptKit& kit() {
  static const PromptKit k;
  return k;
}

BuildContext ctx() {
  BuildContext c;
  c.prompts = &kit();
  c.clock = [] { return std::string("2026-01-01T00:00:00Z"); };
  return c;
}

Sample caption_sample() {
  Sample s;
  s.id = "cap:1";
  s.image_ref = "images/1.jpg";
  s.task_kind = TaskKind::Caption;
  s.instruction = "Describe the image in detail.";
  s.captions = {"A dog sleeps on a red sofa."};
  s.gold_answers = s.captions;
  s.regions = {{"dog", {10, 10, 100, 50}, {640, 480}}};
  s.source_dataset = "coco_caption";
  return s;
}

Sample christmas_sample() {
  Sample s;
  s.id = "qa:xmas:0";
  s.image_ref = "images/okvqa/xmas.jpg";
  s.task_kind = TaskKind::KnowledgeVQA;
  s.instruction = "Answer the question about the image.";
  s.question = "What holiday do we use this for?";
  s.gold_answers = {"christmas"};
  s.captions = {"A decorated tree stands in a living room next to a sofa."};
  s.source_dataset = "okvqa";
  return s;
}

const char* kCleanWithoutQa =
    "Step 1: A dog lies on a sofa. (Uncertainty: 0.1)\n"
    "Step 2: The sofa is red. (Uncertainty: 0.2)\n"
    "Final Answer: A dog sleeping on a red sofa.";

const char* kChristmasWithoutQa =
    "Step 1: A decorated tree stands in the living room. (Uncertainty: 0.1)\n"
    "Step 2: The tree carries ornaments and lights. (Uncertainty: 0.2)\n"
    "Step 3: The holiday tied to such a tree needs outside knowledge. (Uncertainty: 0.8)\n"
    "Step 4: The tree is used for that holiday. (Uncertainty: 0.3)\n"
    "Final Answer: Christmas";

const char* kChristmasContinuation =
    "Question:\n"
    "  Imagined Knowledge Needed: holiday traditions involving decorated indoor trees\n"
    "  Question: Which holiday is generally associated with a decorated tree placed in a living room?\n"
    "  Answer: Christmas\n"
    "Step 3: A decorated indoor tree is a Christmas tradition.\n"
    "Step 4: So the tree is used to celebrate Christmas.\n"
    "Final Answer: Christmas";

TraceRecord without_qa_record(std::string text, const Sample& s) {
  TraceRecord r;
  r.sample_id = s.id;
  r.source_dataset = s.source_dataset;
  r.image_ref = s.image_ref;
  r.variant = TraceVariant::WithoutQA;
  r.raw_text = std::move(text);
  r.trace = parse_trace(r.raw_text, TraceVariant::WithoutQA);
  return r;
}

ErrorCode error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

std::string schema_path_of(auto&& fn) {
  try {
    fn();
  } catch (const SchemaError& e) {
    return e.path();
  }
  FAIL("expected a SchemaError");
  return {};
}

std::vector<UncertaintyScore> scores(std::initializer_list<double> values) {
  std::vector<UncertaintyScore> out;
  for (double v : values) out.push_back(UncertaintyScore::from_hundredths(static_cast<int>(v * 100 + 0.5)));
  return out;
}

// Independent oracle: scans every index with real-valued comparisons.
std::optional<std::size_t> oracle_spike(const std::vector<int>& hundredths, double rise, double absolute) {
  for (std::size_t i = 0; i < hundredths.size(); ++i) {
    bool abs_fires = hundredths[i] / 100.0 >= absolute - 1e-9;
    bool rise_fires = i > 0 && (hundredths[i] - hundredths[i - 1]) / 100.0 >= rise - 1e-9;
    if (abs_fires || rise_fires) return i + 1;
  }
  return std::nullopt;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cor_dataset_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("ingest captions: two images, five captions") {
  auto result = ingest_caption_source(read_json_file("fixtures/ingest/captions.json"));
  REQUIRE(result.samples.size() == 2);
  const auto& a = result.samples[0];
  const auto& b = result.samples[1];
  CHECK(a.id == "cap:391895");
  CHECK(a.image_ref == "images/coco/000000391895.jpg");
  CHECK(a.task_kind == TaskKind::Caption);
  CHECK_FALSE(a.question.has_value());
  CHECK_FALSE(a.instruction.empty());
  CHECK(a.captions.size() == 3);
  CHECK(b.captions.size() == 2);
  CHECK(a.regions.size() == 2);
  CHECK(b.regions.size() == 1);
  CHECK(a.source_dataset == "coco_caption");
  CHECK(a.gold_answers == a.captions);
  for (const auto& s : result.samples) CHECK(question_consistent(s));
}

TEST_CASE("ingest captions: contract cases") {
  CHECK(ingest_caption_source(json{{"images", json::array()}}).samples.empty());
  json bad = {{"images", {{{"id", "a"}, {"file", "a.jpg"}}, {{"file", "b.jpg"}}}}};
  CHECK(schema_path_of([&] { ingest_caption_source(bad); }) == "images[1].id");
  json bad_bbox = {{"images", {{{"id", "a"}, {"file", "a.jpg"}}}},
                   {"regions", {{{"image_id", "a"}, {"label", "x"}, {"bbox", {1, 2, 3}}, {"dims", {10, 10}}}}}};
  CHECK(schema_path_of([&] { ingest_caption_source(bad_bbox); }) == "regions[0].bbox");
  json orphan = {{"images", {{{"id", "a"}, {"file", "a.jpg"}}}},
                 {"captions", {{{"image_id", "zzz"}, {"text", "t"}}}}};
  CHECK(schema_path_of([&] { ingest_caption_source(orphan); }) == "captions[0].image_id");
  CHECK(schema_path_of([&] { ingest_caption_source(json::array()); }).empty());
}

TEST_CASE("ingest vqa: three pairs over two images") {
  auto result = ingest_vqa_source(read_json_file("fixtures/ingest/vqa.json"));
  REQUIRE(result.samples.size() == 3);
  std::set<std::string> images, ids;
  for (const auto& s : result.samples) {
    images.insert(s.image_ref);
    ids.insert(s.id);
    CHECK(s.task_kind == TaskKind::KnowledgeVQA);
    CHECK(s.question.has_value());
    CHECK(question_consistent(s));
    CHECK(s.source_dataset == "okvqa");
  }
  CHECK(images.size() == 2);
  CHECK(ids.size() == 3);
  CHECK(result.samples[0].gold_answers == std::vector<std::string>{"christmas", "christmas", "xmas"});
  CHECK(result.samples[0].captions.size() == 1);
  CHECK(result.samples[0].regions.size() == 1);
  CHECK(result.samples[1].captions.empty());
  CHECK(result.warnings.empty());
}

TEST_CASE("ingest vqa: empty answers warn, unknown sources fail") {
  json shim = {{"images", {{{"id", "a"}, {"file", "a.jpg"}}}},
               {"qa", {{{"image_id", "a"}, {"question", "What is it?"}, {"answers", json::array()}, {"source", "vqa_v2"}}}}};
  auto result = ingest_vqa_source(shim);
  REQUIRE(result.samples.size() == 1);
  CHECK(result.samples[0].gold_answers.empty());
  CHECK(result.samples[0].task_kind == TaskKind::VQA);
  REQUIRE(result.warnings.size() == 1);
  CHECK(result.warnings[0].path == "qa[0].answers");

  shim["qa"][0]["source"] = "made_up";
  CHECK(schema_path_of([&] { ingest_vqa_source(shim); }) == "qa[0].source");
  shim["qa"][0].erase("source");
  CHECK(schema_path_of([&] { ingest_vqa_source(shim); }) == "qa[0].source");
  shim["qa"][0]["source"] = "oven";
  shim["qa"][0].erase("question");
  CHECK(schema_path_of([&] { ingest_vqa_source(shim); }) == "qa[0].question");
}

TEST_CASE("source tags select task kinds") {
  CHECK(task_kind_for_source("vqa_v2") == TaskKind::VQA);
  CHECK(task_kind_for_source("okvqa") == TaskKind::KnowledgeVQA);
  CHECK(task_kind_for_source("aokvqa") == TaskKind::KnowledgeVQA);
  CHECK(task_kind_for_source("encyclopedic_vqa") == TaskKind::EntityVQA);
  CHECK(task_kind_for_source("oven") == TaskKind::EntityVQA);
  CHECK(task_kind_for_source("visual_genome") == TaskKind::VQA);
  CHECK_FALSE(task_kind_for_source("nope").has_value());
}

TEST_CASE("raw layout adapters feed the shim") {
  json coco = {{"images", {{{"id", 7}, {"file_name", "000007.jpg"}, {"width", 640}, {"height", 480}}}},
               {"annotations", {{{"image_id", 7}, {"caption", "A cat."}}, {{"image_id", 7}, {"caption", "A kitten."}}}}};
  auto shim = coco_captions_to_shim(coco, "coco/val2014");
  auto caps = ingest_caption_source(shim).samples;
  REQUIRE(caps.size() == 1);
  CHECK(caps[0].id == "cap:7");
  CHECK(caps[0].image_ref == "coco/val2014/000007.jpg");
  CHECK(caps[0].captions.size() == 2);

  json qs = {{"questions", {{{"image_id", 9}, {"question", "What color?"}, {"question_id", 90}}}}};
  json an = {{"annotations", {{{"question_id", 90}, {"answers", {{{"answer", "red"}}, {{"answer", "red"}}}}}}}};
  auto vqa = ingest_vqa_source(vqa_to_shim(qs, an, "vqa_v2", "vqa", "COCO_{id}.jpg")).samples;
  REQUIRE(vqa.size() == 1);
  CHECK(vqa[0].id == "qa:90");
  CHECK(vqa[0].image_ref == "vqa/COCO_9.jpg");
  CHECK(vqa[0].gold_answers == std::vector<std::string>{"red", "red"});
}

TEST_CASE("sample JSON round trip") {
  auto s = christmas_sample();
  s.regions = {{"tree", {1, 2, 3, 4}, {10, 10}}};
  CHECK(json(s).get<Sample>() == s);
  auto dir = temp_dir("samples");
  save_samples(dir / "s.json", {s, caption_sample()});
  auto back = load_samples(dir / "s.json");
  REQUIRE(back.size() == 2);
  CHECK(back[0] == s);
  std::filesystem::remove_all(dir);
}

TEST_CASE("build_trace: clean canonical output") {
  FixtureBackend fx;
  fx.set_default(kCleanWithoutQa);
  auto rec = build_trace(caption_sample(), TraceVariant::WithoutQA, fx, ctx());
  CHECK_FALSE(rec.quarantined);
  CHECK(rec.violations.empty());
  CHECK(rec.guard_violations.empty());
  CHECK(rec.attempts == 1);
  CHECK(rec.trace == parse_trace(rec.raw_text, TraceVariant::WithoutQA));
  CHECK(rec.template_version == kit().template_version());
  CHECK(rec.backend_id == "fixture");
  CHECK(rec.created_at == "2026-01-01T00:00:00Z");
  CHECK(rec.source_dataset == "coco_caption");
  CHECK(fx.calls() == 1);
}

TEST_CASE("build_trace: lexical violations are reported, not quarantined") {
  FixtureBackend fx;
  fx.set_default(
      "Step 1: The bounding box shows a dog. (Uncertainty: 0.1)\n"
      "Step 2: It sleeps. (Uncertainty: 0.2)\n"
      "Final Answer: A sleeping dog.");
  auto rec = build_trace(caption_sample(), TraceVariant::WithoutQA, fx, ctx());
  CHECK_FALSE(rec.quarantined);
  CHECK(rec.violations.empty());
  REQUIRE(rec.guard_violations.size() == 1);
  CHECK(rec.guard_violations[0].code == ViolationCode::ForbiddenTerm);
  CHECK(fx.calls() == 1);
}

TEST_CASE("build_trace: preconditions") {
  FixtureBackend fx;
  fx.set_default(kCleanWithoutQa);
  auto s = caption_sample();
  s.gold_answers.clear();
  CHECK(error_of([&] { build_trace(s, TraceVariant::WithGT, fx, ctx()); }) == ErrorCode::MissingGold);
  CHECK(error_of([&] { build_trace(caption_sample(), TraceVariant::WithQA, fx, ctx()); }) ==
        ErrorCode::Precondition);
  CHECK(fx.calls() == 0);
}

TEST_CASE("build_trace: one repair round, then quarantine") {
  SUBCASE("repair succeeds") {
    FixtureBackend fx;
    fx.on_contains({"Describe the image"}, {"Step 1: A dog. \nFinal Answer: dog", kCleanWithoutQa});
    auto rec = build_trace(caption_sample(), TraceVariant::WithoutQA, fx, ctx());
    CHECK_FALSE(rec.quarantined);
    CHECK(rec.attempts == 2);
    CHECK(rec.violations.empty());
    auto requests = fx.requests();
    REQUIRE(requests.size() == 2);
    const auto& second = requests[1];
    REQUIRE(second.messages.size() >= 3);
    CHECK(second.messages[second.messages.size() - 2].role == Role::Assistant);
    CHECK(second.all_text().find("MissingUncertainty") != std::string::npos);
  }
  SUBCASE("repair fails") {
    FixtureBackend fx;
    fx.set_default("I cannot help with that.");
    auto rec = build_trace(caption_sample(), TraceVariant::WithoutQA, fx, ctx());
    CHECK(rec.quarantined);
    CHECK(rec.attempts == 2);
    CHECK_FALSE(rec.violations.empty());
    CHECK(fx.calls() == 2);
  }
}

TEST_CASE("build_trace: WithGT prompt receives gold and nothing quarantines on success") {
  FixtureBackend fx;
  fx.set_default("Step 1: The dog rests on the sofa.\nFinal Answer: A dog sleeps on a red sofa.");
  auto rec = build_trace(caption_sample(), TraceVariant::WithGT, fx, ctx());
  CHECK_FALSE(rec.quarantined);
  CHECK(rec.variant == TraceVariant::WithGT);
  CHECK(fx.requests()[0].all_text().find("A dog sleeps on a red sofa.") != std::string::npos);
}

TEST_CASE("image path selection") {
  FixtureBackend text_only("t", false);
  FixtureBackend vision("v", true);
  auto rich = caption_sample();
  auto bare = caption_sample();
  bare.captions.clear();
  bare.regions.clear();
  CHECK_FALSE(use_image_path(rich, text_only, ImageMode::Auto));
  CHECK_FALSE(use_image_path(rich, vision, ImageMode::Auto));
  CHECK(use_image_path(bare, vision, ImageMode::Auto));
  CHECK(use_image_path(rich, vision, ImageMode::Image));
  CHECK_FALSE(use_image_path(bare, vision, ImageMode::TextOnly));
  CHECK_FALSE(use_image_path(bare, text_only, ImageMode::Image));
}

TEST_CASE("detect_spike examples") {
  SpikePolicy p;
  CHECK(detect_spike(scores({0.1, 0.2, 0.7, 0.3}), p) == std::optional<std::size_t>(3));
  CHECK_FALSE(detect_spike(scores({0.1, 0.2, 0.3}), p).has_value());
  CHECK(detect_spike(scores({0.8}), p) == std::optional<std::size_t>(1));
  // exact threshold on both rules
  CHECK(detect_spike(scores({0.2, 0.5}), p) == std::optional<std::size_t>(2));
  CHECK(detect_spike(scores({0.2, 0.49}), p) == std::nullopt);
  CHECK(detect_spike(scores({0.0, 0.69}), p) == std::optional<std::size_t>(2));
  // rise is measured between neighbours only
  CHECK_FALSE(detect_spike(scores({0.1, 0.3, 0.5, 0.69}), p).has_value());
  SpikePolicy all;
  all.mode = SpikePolicy::Mode::AllSpikes;
  CHECK(detect_spikes(scores({0.1, 0.5, 0.9, 0.2, 0.6}), all) == std::vector<std::size_t>{2, 3, 5});
  CHECK(detect_spike(scores({0.1, 0.5, 0.9, 0.2, 0.6}), all) == std::optional<std::size_t>(2));
  CHECK(error_of([] { SpikePolicy{1.5, 0.7}.validate(); }) == ErrorCode::Precondition);
  CHECK(error_of([] { SpikePolicy{0.3, -0.1}.validate(); }) == ErrorCode::Precondition);
  CHECK(error_of([] { detect_spike({}, SpikePolicy{}); }) == ErrorCode::Precondition);
}

TEST_CASE("property: detect_spike matches the brute-force oracle") {
  std::mt19937_64 rng(2024);
  for (int policy_i = 0; policy_i < 20; ++policy_i) {
    SpikePolicy p;
    p.rise_threshold = std::uniform_int_distribution<int>(0, 100)(rng) / 100.0;
    p.absolute_threshold = std::uniform_int_distribution<int>(0, 100)(rng) / 100.0;
    for (int trial = 0; trial < 500; ++trial) {
      int n = std::uniform_int_distribution<int>(1, 12)(rng);
      std::vector<UncertaintyScore> s;
      std::vector<int> h;
      for (int i = 0; i < n; ++i) {
        s.push_back(testing::random_score(rng));
        h.push_back(s.back().hundredths());
      }
      auto expected = oracle_spike(h, p.rise_threshold, p.absolute_threshold);
      REQUIRE(detect_spike(s, p) == expected);
      auto all = detect_spikes(s, p);
      REQUIRE(all.empty() == !expected.has_value());
      if (expected) REQUIRE(all.front() == *expected);
    }
  }
}

TEST_CASE("derive_with_qa: Christmas splice before the spike step") {
  auto sample = christmas_sample();
  auto original = without_qa_record(kChristmasWithoutQa, sample);
  FixtureBackend fx;
  fx.set_default(kChristmasContinuation);
  auto outcome = derive_with_qa(original, sample, SpikePolicy{}, fx, ctx());
  REQUIRE(outcome.status == DeriveOutcome::Status::Derived);
  const auto& rec = outcome.record;
  CHECK_FALSE(rec.quarantined);
  CHECK(rec.variant == TraceVariant::WithQA);
  CHECK(rec.derived);
  CHECK(rec.spike_index == 3);
  CHECK(validate_trace(rec.trace, TraceVariant::WithQA).empty());
  const auto& ev = rec.trace.events;
  REQUIRE(ev.size() == 5);
  CHECK(std::get<Step>(ev[0]) == std::get<Step>(original.trace.events[0]));
  CHECK(std::get<Step>(ev[1]) == std::get<Step>(original.trace.events[1]));
  const auto& q = std::get<QuestionBlock>(ev[2]);
  CHECK(q.question == "Which holiday is generally associated with a decorated tree placed in a living room?");
  CHECK(q.answer == "Christmas");
  CHECK(std::get<Step>(ev[3]).index == 3);
  CHECK(std::get<Step>(ev[4]).index == 4);
  CHECK(rec.trace.final_answer == "Christmas");
  CHECK(rec.trace.step_count() >= original.trace.step_count());
  // the prompt carries the prefix and names the spike step
  auto prompt = fx.requests()[0].all_text();
  CHECK(prompt.find("Step 2: The tree carries ornaments and lights.") != std::string::npos);
  CHECK(prompt.find("christmas") != std::string::npos);
}

TEST_CASE("derive_with_qa: no spike leaves the input untouched") {
  auto sample = caption_sample();
  auto original = without_qa_record(kCleanWithoutQa, sample);
  auto copy = original;
  FixtureBackend fx;
  auto outcome = derive_with_qa(original, sample, SpikePolicy{}, fx, ctx());
  CHECK(outcome.status == DeriveOutcome::Status::NoSpike);
  CHECK(outcome.spikes.empty());
  CHECK(fx.calls() == 0);
  CHECK(original.trace == copy.trace);
}

TEST_CASE("derive_with_qa: rejects inputs that are not valid without-QA traces") {
  auto sample = caption_sample();
  auto bad = without_qa_record("Step 1: A dog.\nFinal Answer: dog", sample);
  FixtureBackend fx;
  CHECK(error_of([&] { derive_with_qa(bad, sample, SpikePolicy{}, fx, ctx()); }) == ErrorCode::Precondition);
}

TEST_CASE("derive_with_qa: continuation repair and quarantine") {
  auto sample = christmas_sample();
  auto original = without_qa_record(kChristmasWithoutQa, sample);
  SUBCASE("missing block then fixed") {
    FixtureBackend fx;
    fx.on_contains({"holiday"}, {"Step 3: Christmas.\nStep 4: Yes.\nFinal Answer: Christmas", kChristmasContinuation});
    auto outcome = derive_with_qa(original, sample, SpikePolicy{}, fx, ctx());
    REQUIRE(outcome.status == DeriveOutcome::Status::Derived);
    CHECK_FALSE(outcome.record.quarantined);
    CHECK(outcome.record.attempts == 2);
  }
  SUBCASE("too short twice") {
    FixtureBackend fx;
    fx.set_default(
        "Question:\n  Imagined Knowledge Needed: k\n  Question: Which holiday?\n  Answer: Christmas\n"
        "Step 3: Christmas.\nFinal Answer: Christmas");
    auto outcome = derive_with_qa(original, sample, SpikePolicy{}, fx, ctx());
    REQUIRE(outcome.status == DeriveOutcome::Status::Derived);
    CHECK(outcome.record.quarantined);
    CHECK_FALSE(outcome.record.violations.empty());
    CHECK(fx.calls() == 2);
  }
}

TEST_CASE("splice_continuation drops repeated prefix steps and renumbers") {
  auto original = parse_trace(kChristmasWithoutQa, TraceVariant::WithoutQA);
  std::string text =
      "Step 1: A decorated tree stands in the living room.\n"
      "Step 2: The tree carries ornaments and lights.\n"
      "Question:\n  Imagined Knowledge Needed: k\n  Question: Which holiday?\n  Answer: Christmas\n"
      "Step 7: First.\nStep 9: Second.\nStep 10: Third.\nFinal Answer: Christmas";
  auto r = splice_continuation(original, 3, text);
  REQUIRE(r.trace.has_value());
  CHECK(r.violations.empty());
  auto steps = r.trace->steps();
  REQUIRE(steps.size() == 5);
  CHECK(steps[2]->index == 3);
  CHECK(steps[4]->index == 5);
  CHECK(steps[4]->text == "Third.");

  auto two_blocks = splice_continuation(original, 3,
                                        "Question:\n  Imagined Knowledge Needed: k\n  Question: A?\n  Answer: a\n"
                                        "Step 3: x\nQuestion:\n  Imagined Knowledge Needed: k\n  Question: B?\n"
                                        "  Answer: b\nStep 4: y\nFinal Answer: z");
  CHECK_FALSE(two_blocks.trace.has_value());
  CHECK_FALSE(two_blocks.violations.empty());
  auto unanswered = splice_continuation(original, 3,
                                        "Question:\n  Imagined Knowledge Needed: k\n  Question: A?\n"
                                        "Step 3: x\nStep 4: y\nFinal Answer: z");
  CHECK_FALSE(unanswered.trace.has_value());
}

TEST_CASE("property: derived traces place one block at the spike and grow") {
  std::mt19937_64 rng(77);
  SpikePolicy policy;
  int derived = 0;
  for (int i = 0; i < 200; ++i) {
    auto trace = testing::random_valid_trace(rng, TraceVariant::WithoutQA);
    auto uncertainties = trace.uncertainties();
    auto spike = detect_spike(uncertainties, policy);
    std::size_t n = trace.step_count();
    std::string continuation =
        "Question:\n  Imagined Knowledge Needed: " + testing::random_phrase(rng) +
        "\n  Question: " + testing::random_phrase(rng) + "?\n  Answer: " + testing::random_phrase(rng) + "\n";
    std::size_t extra = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
    for (std::size_t k = spike.value_or(1); k <= n + extra; ++k)
      continuation += "Step " + std::to_string(k) + ": revised " + std::to_string(k) + "\n";
    continuation += "Final Answer: done";

    Sample s = caption_sample();
    s.id = "p" + std::to_string(i);
    TraceRecord rec;
    rec.sample_id = s.id;
    rec.variant = TraceVariant::WithoutQA;
    rec.trace = trace;
    rec.raw_text = render_trace(trace);
    FixtureBackend fx;
    fx.set_default(continuation);
    auto out = derive_with_qa(rec, s, policy, fx, ctx());
    if (!spike) {
      CHECK(out.status == DeriveOutcome::Status::NoSpike);
      continue;
    }
    ++derived;
    REQUIRE(out.status == DeriveOutcome::Status::Derived);
    REQUIRE_FALSE(out.record.quarantined);
    const auto& t = out.record.trace;
    CHECK(t.question_count() == 1);
    std::size_t steps_before = 0;
    for (const auto& e : t.events) {
      if (is_question(e)) break;
      ++steps_before;
    }
    CHECK(steps_before + 1 == *spike);
    CHECK(t.events.size() > trace.events.size());
    CHECK(t.step_count() >= trace.step_count());
    CHECK(validate_trace(t, TraceVariant::WithQA).empty());
  }
  CHECK(derived > 50);
}

TEST_CASE("record JSON round trip and corpus files") {
  FixtureBackend fx;
  fx.set_default(kCleanWithoutQa);
  auto rec = build_trace(caption_sample(), TraceVariant::WithoutQA, fx, ctx());
  json j = rec;
  CHECK(j.at("rendered") == render_trace(rec.trace));
  auto back = j.get<TraceRecord>();
  CHECK(back.trace == rec.trace);
  CHECK(back.raw_text == rec.raw_text);
  CHECK(back.key() == rec.key());

  auto dir = temp_dir("corpus");
  {
    CorpusWriter writer(dir / "corpus.jsonl", dir / "quarantine.jsonl");
    writer.write(rec);
    auto second = rec;
    second.raw_text = "Step 1: Changed. (Uncertainty: 0.4)\nFinal Answer: x";
    second.trace = parse_trace(second.raw_text, TraceVariant::WithoutQA);
    writer.write(second);
    auto other = rec;
    other.sample_id = "cap:2";
    writer.write(other);
    auto bad = rec;
    bad.sample_id = "cap:3";
    bad.quarantined = true;
    writer.write(bad);
    CHECK(writer.written() == 3);
    CHECK(writer.quarantined() == 1);
  }
  auto loaded = load_corpus(dir / "corpus.jsonl");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].sample_id == "cap:1");
  CHECK(loaded[0].trace.step_count() == 1);  // last write wins
  CHECK(loaded[1].sample_id == "cap:2");
  CHECK(std::filesystem::exists(dir / "quarantine.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("stats: fixture corpus of four and six steps") {
  auto records = load_corpus("fixtures/corpus.jsonl");
  REQUIRE(records.size() == 2);
  auto table = corpus_stats(records);
  REQUIRE(table.rows.size() == 1);
  const auto& v = table.total.variants.at(TraceVariant::WithoutQA);
  CHECK(v.records == 2);
  CHECK(v.avg_steps == doctest::Approx(5.0));
  CHECK(table.total.num_samples == 2);
  CHECK(format_stats_table(table).find("5.00") != std::string::npos);
}

TEST_CASE("stats: three samples over two images") {
  auto samples = ingest_vqa_source(read_json_file("fixtures/ingest/vqa.json")).samples;
  std::vector<TraceRecord> records;
  int n = 2;
  for (const auto& s : samples) {
    TraceRecord r;
    r.sample_id = s.id;
    r.source_dataset = s.source_dataset;
    r.image_ref = s.image_ref;
    r.variant = TraceVariant::WithGT;
    for (int k = 1; k <= n; ++k) r.trace.events.emplace_back(Step{k, "s", std::nullopt});
    r.trace.final_answer = "x";
    records.push_back(r);
    ++n;
  }
  auto table = corpus_stats(records, &samples);
  REQUIRE(table.rows.size() == 1);
  CHECK(table.rows[0].num_samples == 3);
  CHECK(table.rows[0].num_unique_images == 2);
  CHECK(table.rows[0].variants.at(TraceVariant::WithGT).avg_steps == doctest::Approx(3.0));
  auto without_samples = corpus_stats(records);
  CHECK(without_samples.rows[0].num_samples == 3);
  CHECK(without_samples.rows[0].num_unique_images == 2);
}

TEST_CASE("stats: steps exclude question blocks, events include them; quarantine skipped") {
  TraceRecord a;
  a.sample_id = "a";
  a.source_dataset = "src";
  a.image_ref = "a.jpg";
  a.variant = TraceVariant::WithQA;
  a.trace = parse_trace(kChristmasContinuation, TraceVariant::WithQA);  // 2 steps + 1 block
  TraceRecord q = a;
  q.sample_id = "q";
  q.quarantined = true;
  for (int k = 3; k <= 40; ++k) q.trace.events.emplace_back(Step{k, "pad", std::nullopt});
  auto table = corpus_stats({a, q});
  const auto& v = table.total.variants.at(TraceVariant::WithQA);
  CHECK(v.records == 1);
  CHECK(v.avg_steps == doctest::Approx(2.0));
  CHECK(v.avg_events == doctest::Approx(3.0));
  CHECK(table.total.num_samples == 1);
}

TEST_CASE("property: Total row equals recomputation over the union") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> sources{"coco_caption", "vqa_v2", "okvqa", "oven"};
  for (int round = 0; round < 30; ++round) {
    std::vector<TraceRecord> records;
    int count = std::uniform_int_distribution<int>(1, 60)(rng);
    for (int i = 0; i < count; ++i) {
      TraceRecord r;
      r.sample_id = "s" + std::to_string(i);
      r.source_dataset = sources[std::uniform_int_distribution<std::size_t>(0, sources.size() - 1)(rng)];
      r.image_ref = "img" + std::to_string(std::uniform_int_distribution<int>(0, 20)(rng));
      r.variant = static_cast<TraceVariant>(std::uniform_int_distribution<int>(0, 2)(rng));
      r.trace = testing::random_valid_trace(rng, r.variant);
      records.push_back(r);
    }
    auto table = corpus_stats(records);
    std::map<TraceVariant, std::pair<double, std::size_t>> sums;
    std::set<std::string> ids, images;
    for (const auto& r : records) {
      sums[r.variant].first += static_cast<double>(r.trace.step_count());
      sums[r.variant].second += 1;
      ids.insert(r.sample_id);
      images.insert(r.image_ref);
    }
    for (const auto& [variant, sum] : sums) {
      REQUIRE(table.total.variants.at(variant).records == sum.second);
      CHECK(table.total.variants.at(variant).avg_steps == doctest::Approx(sum.first / sum.second));
    }
    CHECK(table.total.num_samples == ids.size());
    CHECK(table.total.num_unique_images == images.size());
    std::size_t row_samples = 0, row_images = 0;
    for (const auto& row : table.rows) {
      row_samples += row.num_samples;
      row_images += row.num_unique_images;
    }
    CHECK(table.total.num_samples == row_samples);
    CHECK(table.images_column_sum == row_images);
  }
}

TEST_CASE("stats: published rows render their totals") {
  using V = TraceVariant;
  std::vector<PublishedRow> rows{
      {"COCO Caption", 5857, 5782, {{V::WithoutQA, 6.27}, {V::WithQA, 8.75}, {V::WithGT, 6.20}}},
      {"VQA v2", 5755, 5633, {{V::WithoutQA, 4.68}, {V::WithQA, 7.36}, {V::WithGT, 4.54}}},
      {"OK-VQA", 5793, 5792, {{V::WithoutQA, 4.77}, {V::WithQA, 7.35}, {V::WithGT, 4.55}}},
      {"A-OKVQA", 5736, 5718, {{V::WithoutQA, 4.87}, {V::WithQA, 7.43}, {V::WithGT, 4.63}}},
      {"Visual Genome", 5883, 5609, {{V::WithoutQA, 4.34}, {V::WithQA, 7.31}, {V::WithGT, 4.12}}},
      {"Encyclopedic VQA", 6521, 6186, {{V::WithoutQA, 7.00}, {V::WithQA, 9.45}, {V::WithGT, 7.00}}},
      {"OVEN", 5685, 5685, {{V::WithoutQA, 6.99}, {V::WithQA, 9.51}, {V::WithGT, 6.99}}},
  };
  auto table = stats_from_rows(rows, 39272);
  CHECK(table.total.num_samples == 41230);
  CHECK(table.total.num_unique_images == 39272);
  CHECK(table.images_column_sum == 40405);
  auto text = format_stats_table(table);
  CHECK(text.find("41,230") != std::string::npos);
  CHECK(text.find("39,272") != std::string::npos);
  CHECK(text.find("5.58") != std::string::npos);
  CHECK(text.find("8.19") != std::string::npos);
  CHECK(text.find("5.46") != std::string::npos);
  CHECK(text.find("6,521") != std::string::npos);
  auto csv = stats_csv(table);
  CHECK(csv.find("Total,41230,39272,5.58") != std::string::npos);
  CHECK(stats_from_rows(rows).total.num_unique_images == 40405);
  CHECK(format_thousands(0) == "0");
  CHECK(format_thousands(999) == "999");
  CHECK(format_thousands(1000) == "1,000");
  CHECK(format_thousands(1234567) == "1,234,567");
}
