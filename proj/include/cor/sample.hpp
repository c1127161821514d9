#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cor {

enum class TaskKind { Caption, VQA, KnowledgeVQA, EntityVQA };

std::string_view to_string(TaskKind kind);
std::optional<TaskKind> parse_task_kind(std::string_view text);

struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ImageDims {
  double width = 0, height = 0;
  friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

// A labelled box in source-image pixels.
struct RegionAnnotation {
  std::string label;
  BoundingBox bbox;
  ImageDims source_dims;

  // 0 <= x < x+w <= width and 0 <= y < y+h <= height.
  bool valid() const noexcept;
  friend bool operator==(const RegionAnnotation&, const RegionAnnotation&) = default;
};

struct Sample {
  std::string id;
  std::string image_ref;
  TaskKind task_kind = TaskKind::Caption;
  std::string instruction;
  std::optional<std::string> question;
  std::vector<std::string> gold_answers;
  std::vector<RegionAnnotation> regions;
  std::vector<std::string> captions;
  std::string source_dataset;

  bool has_scene_text() const noexcept { return !regions.empty() || !captions.empty(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

// task_kind=Caption ⇒ no question; VQA-like kinds ⇒ question present.
bool question_consistent(const Sample& sample) noexcept;

}  // namespace cor
