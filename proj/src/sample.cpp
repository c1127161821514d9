#include "cor/sample.hpp"

#include "cor/text.hpp"

namespace cor {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Caption: return "caption";
    case TaskKind::VQA: return "vqa";
    case TaskKind::KnowledgeVQA: return "knowledge_vqa";
    case TaskKind::EntityVQA: return "entity_vqa";
  }
  return "unknown";
}

std::optional<TaskKind> parse_task_kind(std::string_view s) {
  std::string key = text::lower(s);
  if (key == "caption") return TaskKind::Caption;
  if (key == "vqa") return TaskKind::VQA;
  if (key == "knowledge_vqa" || key == "knowledgevqa") return TaskKind::KnowledgeVQA;
  if (key == "entity_vqa" || key == "entityvqa") return TaskKind::EntityVQA;
  return std::nullopt;
}

bool RegionAnnotation::valid() const noexcept {
  return source_dims.width > 0 && source_dims.height > 0 && bbox.x >= 0 && bbox.y >= 0 &&
         bbox.w > 0 && bbox.h > 0 && bbox.x + bbox.w <= source_dims.width &&
         bbox.y + bbox.h <= source_dims.height;
}

bool question_consistent(const Sample& sample) noexcept {
  return (sample.task_kind == TaskKind::Caption) != sample.question.has_value();
}

}  // namespace cor
