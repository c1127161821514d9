#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cor/sample.hpp"
#include "cor/trace.hpp"

namespace cor {

enum class PartKind { Text, Image };

// One element of a user message. For images `value` is a file path, URL, or
// data: URI; the backend resolves it.
struct PromptPart {
  PartKind kind = PartKind::Text;
  std::string value;

  static PromptPart text(std::string s) { return {PartKind::Text, std::move(s)}; }
  static PromptPart image(std::string ref) { return {PartKind::Image, std::move(ref)}; }
  friend bool operator==(const PromptPart&, const PromptPart&) = default;
};

struct PromptText {
  std::string system;
  std::vector<PromptPart> user_parts;

  bool has_image() const noexcept;
  // System and user text joined, images shown as "[image: ref]". Used for
  // dry runs, substring checks, and transcript logs.
  std::string flatten() const;
  friend bool operator==(const PromptText&, const PromptText&) = default;
};

enum class PromptKind { BuilderWithoutQA, BuilderWithGT, BuilderWithQA, Answerer, Judge };
inline constexpr std::array kAllPromptKinds = {PromptKind::BuilderWithoutQA, PromptKind::BuilderWithGT,
                                               PromptKind::BuilderWithQA, PromptKind::Answerer,
                                               PromptKind::Judge};

// File stem of the template for `kind`, e.g. "builder_without_qa".
std::string_view template_name(PromptKind kind);

struct PromptTemplate {
  std::string system;
  std::string user;
};

using TemplateVars = std::map<std::string, std::string, std::less<>>;

// Renders `{{name}}` placeholders plus `{{#name}}...{{/name}}` (kept when the
// variable is non-empty) and `{{^name}}...{{/name}}` (kept when empty or
// unset) sections. A section tag alone on its line consumes that line.
// Throws Error{TemplateError} for unknown placeholders or unbalanced sections.
std::string render_template(std::string_view tmpl, const TemplateVars& vars);

class TemplateSet {
 public:
  // The templates compiled into the library (mirrors templates/ in the repo).
  static TemplateSet defaults();
  // Loads `<dir>/<name>.txt` for every prompt kind plus `<dir>/VERSION`.
  static TemplateSet load(const std::filesystem::path& dir);
  // Parses the "[system]" / "[user]" section layout of a template file.
  static PromptTemplate parse_file(std::string_view content);

  const PromptTemplate& get(PromptKind kind) const;
  // "<declared version>+<first 12 hex digits of the content digest>".
  const std::string& version() const noexcept { return version_; }

 private:
  TemplateSet(std::map<PromptKind, PromptTemplate> templates, std::string declared_version);

  std::map<PromptKind, PromptTemplate> templates_;
  std::string version_;
};

struct LexicalPolicy {
  std::vector<std::string> forbidden_terms{"caption", "description", "bounding box"};
  // Coordinate leak: 2..4 comma-separated integers inside () or [], at least
  // one of them with `coordinate_min_digits` or more digits.
  bool detect_coordinates = true;
  int coordinate_min_digits = 3;
};

// Returns one violation per forbidden-term occurrence and per coordinate-like
// tuple, ordered by character offset.
std::vector<Violation> lexical_guard(std::string_view text, const LexicalPolicy& policy = {});

// "<label>: [x', y', w', h']" in a 1000x1000 frame, rounded half up.
std::string serialize_region(const RegionAnnotation& region);

// Extra context for deriving a with-QA trace from a without-QA one. Passing
// no derivation selects fresh generation. `prefix_steps` is empty when the
// spike is at step 1.
struct QaDerivation {
  std::string prefix_steps;     // rendered steps 1..spike-1
  std::string remaining_steps;  // rendered original steps spike..n
  int spike_index = 1;
};

struct PromptKitOptions {
  std::size_t max_chars = 200'000;
};

class PromptKit {
 public:
  explicit PromptKit(TemplateSet templates = TemplateSet::defaults(), PromptKitOptions options = {});

  // Throws Error{MissingAnnotations} on the text-only path without scene
  // evidence and Error{MissingGold} for with-GT / with-QA without gold answers.
  PromptText render_builder_prompt(const Sample& sample, TraceVariant variant, bool image_capable,
                                   const QaDerivation* derivation = nullptr) const;

  // `block` must be pending. `image_ref` attaches the sample image for
  // image-capable answerers.
  PromptText render_answerer_prompt(const QuestionBlock& block,
                                    std::optional<std::string_view> sample_context,
                                    std::optional<std::string> image_ref = std::nullopt) const;

  PromptText render_judge_prompt(const Sample& sample, const ReasoningTrace& trace) const;

  const std::string& template_version() const noexcept { return templates_.version(); }
  const TemplateSet& templates() const noexcept { return templates_; }

 private:
  PromptText finish(std::string system, std::string user, std::optional<std::string> image) const;

  TemplateSet templates_;
  PromptKitOptions options_;
};

// Compiled-in template sources keyed by template_name(); generated at build time.
const std::map<std::string, std::string, std::less<>>& embedded_template_sources();

}  // namespace cor
