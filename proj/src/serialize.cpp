#include "cor/serialize.hpp"

#include "cor/errors.hpp"

namespace cor {

using nlohmann::json;

UncertaintyScore parse_uncertainty(std::string_view text) {
  std::size_t dot = text.find('.');
  std::string digits(text);
  int decimals = 0;
  if (dot != std::string_view::npos) {
    decimals = static_cast<int>(text.size() - dot - 1);
    digits.erase(dot, 1);
  }
  require(!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos,
          "invalid uncertainty '" + std::string(text) + "'");
  return UncertaintyScore(std::stoi(digits), decimals);
}

void to_json(json& j, const ReasoningTrace& t) {
  json events = json::array();
  for (const auto& e : t.events) {
    if (const auto* s = std::get_if<Step>(&e)) {
      json step{{"type", "step"}, {"index", s->index}, {"text", s->text}};
      if (s->uncertainty) step["uncertainty"] = s->uncertainty->to_string();
      events.push_back(std::move(step));
    } else {
      const auto& q = std::get<QuestionBlock>(e);
      json block{{"type", "question"}, {"imagined_knowledge", q.imagined_knowledge}, {"question", q.question}};
      if (q.answer) block["answer"] = *q.answer;
      events.push_back(std::move(block));
    }
  }
  j = json{{"variant", to_string(t.variant)}, {"events", std::move(events)}};
  if (t.final_answer) j["final_answer"] = *t.final_answer;
}

void from_json(const json& j, ReasoningTrace& t) {
  auto variant = parse_variant(j.at("variant").get<std::string>());
  require(variant.has_value(), "unknown trace variant");
  t.variant = *variant;
  t.events.clear();
  for (const auto& e : j.at("events")) {
    if (e.at("type") == "step") {
      Step s{e.at("index").get<int>(), e.at("text").get<std::string>(), std::nullopt};
      if (e.contains("uncertainty")) s.uncertainty = parse_uncertainty(e["uncertainty"].get<std::string>());
      t.events.emplace_back(std::move(s));
    } else {
      QuestionBlock q{e.at("imagined_knowledge").get<std::string>(), e.at("question").get<std::string>(),
                      std::nullopt};
      if (e.contains("answer")) q.answer = e["answer"].get<std::string>();
      t.events.emplace_back(std::move(q));
    }
  }
  t.final_answer.reset();
  if (j.contains("final_answer")) t.final_answer = j["final_answer"].get<std::string>();
}

void to_json(json& j, const Violation& v) {
  j = json{{"code", to_string(v.code)}, {"location", v.location}, {"message", v.message}};
}

void from_json(const json& j, Violation& v) {
  auto code = parse_violation_code(j.at("code").get<std::string>());
  require(code.has_value(), "unknown violation code");
  v.code = *code;
  v.location = j.value("location", std::size_t{0});
  v.message = j.value("message", "");
}

void to_json(json& j, const RegionAnnotation& r) {
  j = json{{"label", r.label},
           {"bbox", {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h}},
           {"dims", {r.source_dims.width, r.source_dims.height}}};
}

void from_json(const json& j, RegionAnnotation& r) {
  r.label = j.at("label").get<std::string>();
  auto b = j.at("bbox").get<std::vector<double>>();
  auto d = j.at("dims").get<std::vector<double>>();
  require(b.size() == 4 && d.size() == 2, "region needs bbox[4] and dims[2]");
  r.bbox = {b[0], b[1], b[2], b[3]};
  r.source_dims = {d[0], d[1]};
}

void to_json(json& j, const Sample& s) {
  j = json{{"id", s.id},
           {"image_ref", s.image_ref},
           {"task_kind", to_string(s.task_kind)},
           {"instruction", s.instruction},
           {"gold_answers", s.gold_answers},
           {"regions", s.regions},
           {"captions", s.captions},
           {"source_dataset", s.source_dataset}};
  if (s.question) j["question"] = *s.question;
}

void from_json(const json& j, Sample& s) {
  s.id = j.at("id").get<std::string>();
  s.image_ref = j.value("image_ref", "");
  auto kind = parse_task_kind(j.value("task_kind", "caption"));
  require(kind.has_value(), "unknown task kind for sample " + s.id);
  s.task_kind = *kind;
  s.instruction = j.value("instruction", "");
  s.question.reset();
  if (j.contains("question") && !j["question"].is_null()) s.question = j["question"].get<std::string>();
  s.gold_answers = j.value("gold_answers", std::vector<std::string>{});
  s.regions = j.value("regions", std::vector<RegionAnnotation>{});
  s.captions = j.value("captions", std::vector<std::string>{});
  s.source_dataset = j.value("source_dataset", "");
}

}  // namespace cor
