#include "cor/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cor/digest.hpp"
#include "cor/errors.hpp"
#include "cor/text.hpp"

namespace cor {

namespace {

// ---- template engine ------------------------------------------------------

enum class TokenKind { Text, Var, Open, OpenInverted, Close };

struct Token {
  TokenKind kind;
  std::string value;
};

bool is_blank(char c) { return c == ' ' || c == '\t'; }

std::vector<Token> tokenize(std::string_view tmpl) {
  std::vector<Token> tokens;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    std::size_t open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      tokens.push_back({TokenKind::Text, std::string(tmpl.substr(pos))});
      break;
    }
    std::size_t close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) fail(ErrorCode::TemplateError, "unterminated '{{'");

    std::string body(text::trim(tmpl.substr(open + 2, close - open - 2)));
    TokenKind kind = TokenKind::Var;
    if (!body.empty() && (body[0] == '#' || body[0] == '^' || body[0] == '/')) {
      kind = body[0] == '#' ? TokenKind::Open : body[0] == '^' ? TokenKind::OpenInverted : TokenKind::Close;
      body = std::string(text::trim(std::string_view(body).substr(1)));
    }
    if (body.empty()) fail(ErrorCode::TemplateError, "empty placeholder");

    std::size_t text_start = pos;
    std::size_t text_end = open;
    std::size_t next = close + 2;
    if (kind != TokenKind::Var) {
      // Standalone section tag: swallow its indentation and line break.
      std::size_t line_start = open;
      while (line_start > text_start && is_blank(tmpl[line_start - 1])) --line_start;
      bool at_line_start = line_start == 0 || tmpl[line_start - 1] == '\n';
      std::size_t after = next;
      while (after < tmpl.size() && is_blank(tmpl[after])) ++after;
      bool at_line_end = after == tmpl.size() || tmpl[after] == '\n' ||
                         (tmpl[after] == '\r' && after + 1 < tmpl.size() && tmpl[after + 1] == '\n');
      if (at_line_start && at_line_end) {
        text_end = line_start;
        if (after < tmpl.size() && tmpl[after] == '\r') ++after;
        next = after < tmpl.size() ? after + 1 : after;
      }
    }
    if (text_end > text_start) {
      tokens.push_back({TokenKind::Text, std::string(tmpl.substr(text_start, text_end - text_start))});
    }
    tokens.push_back({kind, std::move(body)});
    pos = next;
  }
  return tokens;
}

bool truthy(const TemplateVars& vars, std::string_view name) {
  auto it = vars.find(name);
  return it != vars.end() && !it->second.empty();
}

std::size_t render_range(const std::vector<Token>& tokens, std::size_t pos,
                         const TemplateVars& vars, bool emit, const std::string* section,
                         std::string& out) {
  while (pos < tokens.size()) {
    const Token& t = tokens[pos];
    switch (t.kind) {
      case TokenKind::Text:
        if (emit) out += t.value;
        ++pos;
        break;
      case TokenKind::Var: {
        auto it = vars.find(t.value);
        if (it == vars.end()) fail(ErrorCode::TemplateError, "unknown placeholder '" + t.value + "'");
        if (emit) out += it->second;
        ++pos;
        break;
      }
      case TokenKind::Open:
      case TokenKind::OpenInverted: {
        bool on = truthy(vars, t.value) == (t.kind == TokenKind::Open);
        pos = render_range(tokens, pos + 1, vars, emit && on, &t.value, out);
        break;
      }
      case TokenKind::Close:
        if (!section || *section != t.value) {
          fail(ErrorCode::TemplateError, "unbalanced section close '" + t.value + "'");
        }
        return pos + 1;
    }
  }
  if (section) fail(ErrorCode::TemplateError, "unclosed section '" + *section + "'");
  return pos;
}

// ---- lexical guard ---------------------------------------------------------

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

char lower_char(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

std::vector<std::string> split_words(std::string_view term) {
  std::vector<std::string> words;
  std::istringstream in{std::string(term)};
  for (std::string w; in >> w;) words.push_back(text::lower(w));
  return words;
}

// Length of a case-insensitive match of `words` (separated by any whitespace)
// starting exactly at `pos`, or 0.
std::size_t match_words_at(std::string_view s, std::size_t pos, const std::vector<std::string>& words) {
  std::size_t i = pos;
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w > 0) {
      std::size_t ws = i;
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
      if (i == ws) return 0;
    }
    const std::string& word = words[w];
    if (i + word.size() > s.size()) return 0;
    for (std::size_t k = 0; k < word.size(); ++k)
      if (lower_char(s[i + k]) != word[k]) return 0;
    i += word.size();
  }
  return i - pos;
}

std::size_t match_coordinate_tuple(std::string_view s, std::size_t pos, int min_digits) {
  if (s[pos] != '(' && s[pos] != '[') return 0;
  std::size_t i = pos + 1;
  auto skip_ws = [&] {
    while (i < s.size() && is_blank(s[i])) ++i;
  };
  int count = 0;
  bool long_enough = false;
  while (true) {
    skip_ws();
    std::size_t start = i;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == start) return 0;
    ++count;
    if (static_cast<int>(i - start) >= min_digits) long_enough = true;
    skip_ws();
    if (i < s.size() && s[i] == ',') {
      ++i;
      continue;
    }
    break;
  }
  if (i >= s.size() || (s[i] != ')' && s[i] != ']')) return 0;
  if (count < 2 || count > 4 || !long_enough) return 0;
  return i + 1 - pos;
}

std::string bullet_list(const std::vector<std::string>& items) {
  std::vector<std::string> lines;
  for (const auto& item : items) lines.push_back("- " + item);
  return text::join(lines, "\n");
}

std::string scene_block(const Sample& sample) {
  std::vector<std::string> parts;
  if (!sample.captions.empty()) parts.push_back("Sentences about the image:\n" + bullet_list(sample.captions));
  if (!sample.regions.empty()) {
    std::vector<std::string> regions;
    for (const auto& r : sample.regions) regions.push_back(serialize_region(r));
    parts.push_back("Objects with positions [x, y, width, height]:\n" + bullet_list(regions));
  }
  return text::join(parts, "\n");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string strip_trailing_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

// ---- PromptText ------------------------------------------------------------

bool PromptText::has_image() const noexcept {
  return std::any_of(user_parts.begin(), user_parts.end(),
                     [](const PromptPart& p) { return p.kind == PartKind::Image; });
}

std::string PromptText::flatten() const {
  std::string out = system;
  for (const auto& part : user_parts) {
    if (!out.empty()) out += "\n";
    out += part.kind == PartKind::Text ? part.value : "[image: " + part.value + "]";
  }
  return out;
}

std::string_view template_name(PromptKind kind) {
  switch (kind) {
    case PromptKind::BuilderWithoutQA: return "builder_without_qa";
    case PromptKind::BuilderWithGT: return "builder_with_gt";
    case PromptKind::BuilderWithQA: return "builder_with_qa";
    case PromptKind::Answerer: return "answerer";
    case PromptKind::Judge: return "judge";
  }
  return "unknown";
}

std::string render_template(std::string_view tmpl, const TemplateVars& vars) {
  std::string out;
  render_range(tokenize(tmpl), 0, vars, true, nullptr, out);
  return out;
}

// ---- TemplateSet -----------------------------------------------------------

TemplateSet::TemplateSet(std::map<PromptKind, PromptTemplate> templates, std::string declared_version)
    : templates_(std::move(templates)) {
  std::string material;
  for (const auto& [kind, t] : templates_) {
    material += std::string(template_name(kind)) + '\0' + t.system + '\0' + t.user + '\0';
  }
  version_ = std::string(text::trim(declared_version)) + "+" + sha256_hex(material).substr(0, 12);
}

PromptTemplate TemplateSet::parse_file(std::string_view content) {
  PromptTemplate t;
  std::string* target = nullptr;
  bool saw_user = false;
  std::string current;
  for (std::string_view line : text::split_lines(content)) {
    std::string_view trimmed = text::trim(line);
    if (trimmed == "[system]") {
      target = &t.system;
      continue;
    }
    if (trimmed == "[user]") {
      target = &t.user;
      saw_user = true;
      continue;
    }
    if (target) {
      *target += line;
      *target += '\n';
    }
  }
  if (!saw_user) fail(ErrorCode::TemplateError, "template has no [user] section");
  t.system = strip_trailing_newlines(std::move(t.system));
  t.user = strip_trailing_newlines(std::move(t.user));
  return t;
}

TemplateSet TemplateSet::defaults() {
  const auto& sources = embedded_template_sources();
  std::map<PromptKind, PromptTemplate> templates;
  for (PromptKind kind : kAllPromptKinds) {
    auto it = sources.find(template_name(kind));
    if (it == sources.end()) fail(ErrorCode::TemplateError, "missing embedded template");
    templates[kind] = parse_file(it->second);
  }
  auto version = sources.find("VERSION");
  return TemplateSet(std::move(templates), version == sources.end() ? "0" : version->second);
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  std::map<PromptKind, PromptTemplate> templates;
  for (PromptKind kind : kAllPromptKinds) {
    templates[kind] = parse_file(read_file(dir / (std::string(template_name(kind)) + ".txt")));
  }
  return TemplateSet(std::move(templates), read_file(dir / "VERSION"));
}

const PromptTemplate& TemplateSet::get(PromptKind kind) const { return templates_.at(kind); }

// ---- lexical guard / regions -------------------------------------------------

std::vector<Violation> lexical_guard(std::string_view s, const LexicalPolicy& policy) {
  std::vector<Violation> out;
  for (const auto& term : policy.forbidden_terms) {
    auto words = split_words(term);
    if (words.empty()) continue;
    const bool single = words.size() == 1;
    for (std::size_t pos = 0; pos < s.size(); ++pos) {
      if (single && pos > 0 && is_word_char(s[pos - 1])) continue;
      std::size_t len = match_words_at(s, pos, words);
      if (len == 0) continue;
      if (single && pos + len < s.size() && is_word_char(s[pos + len])) continue;
      out.push_back({ViolationCode::ForbiddenTerm, pos, "forbidden term \"" + term + "\""});
    }
  }
  if (policy.detect_coordinates) {
    for (std::size_t pos = 0; pos < s.size(); ++pos) {
      if (std::size_t len = match_coordinate_tuple(s, pos, policy.coordinate_min_digits)) {
        out.push_back({ViolationCode::CoordinateLeak, pos,
                       "coordinate tuple \"" + std::string(s.substr(pos, len)) + "\""});
        pos += len - 1;
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const Violation& a, const Violation& b) {
    return a.location < b.location;
  });
  return out;
}

std::string serialize_region(const RegionAnnotation& r) {
  require(r.valid(), "region '" + r.label + "' lies outside its source image");
  auto scale = [](double v, double extent) {
    return static_cast<long long>(std::floor(1000.0 * v / extent + 0.5));
  };
  std::ostringstream out;
  out << r.label << ": [" << scale(r.bbox.x, r.source_dims.width) << ", "
      << scale(r.bbox.y, r.source_dims.height) << ", " << scale(r.bbox.w, r.source_dims.width)
      << ", " << scale(r.bbox.h, r.source_dims.height) << "]";
  return out.str();
}

// ---- PromptKit -----------------------------------------------------------------

PromptKit::PromptKit(TemplateSet templates, PromptKitOptions options)
    : templates_(std::move(templates)), options_(options) {}

PromptText PromptKit::finish(std::string system, std::string user, std::optional<std::string> image) const {
  PromptText prompt;
  prompt.system = std::move(system);
  if (image) prompt.user_parts.push_back(PromptPart::image(std::move(*image)));
  prompt.user_parts.push_back(PromptPart::text(std::move(user)));
  std::size_t size = prompt.system.size();
  for (const auto& p : prompt.user_parts) size += p.value.size();
  if (size > options_.max_chars) {
    fail(ErrorCode::PromptTooLong, std::to_string(size) + " chars exceeds limit of " +
                                       std::to_string(options_.max_chars));
  }
  return prompt;
}

PromptText PromptKit::render_builder_prompt(const Sample& sample, TraceVariant variant,
                                            bool image_capable, const QaDerivation* derivation) const {
  if (!image_capable && !sample.has_scene_text()) {
    fail(ErrorCode::MissingAnnotations,
         "sample " + sample.id + " has no captions or regions for the text-only path");
  }
  if (image_capable) require(!sample.image_ref.empty(), "sample " + sample.id + " has no image");
  if (variant != TraceVariant::WithoutQA && sample.gold_answers.empty()) {
    fail(ErrorCode::MissingGold, "sample " + sample.id + " has no gold answers");
  }

  TemplateVars vars{
      {"instruction", sample.instruction},
      {"question", sample.question.value_or("")},
      {"text_only", image_capable ? "" : "1"},
      {"image_input", image_capable ? "1" : ""},
      {"scene", image_capable ? "" : scene_block(sample)},
      {"gold_answers", variant == TraceVariant::WithoutQA ? "" : bullet_list(sample.gold_answers)},
      {"derive", derivation ? "1" : ""},
      {"prefix_steps", derivation ? derivation->prefix_steps : ""},
      {"remaining_steps", derivation ? derivation->remaining_steps : ""},
      {"spike_index", derivation ? std::to_string(derivation->spike_index) : ""},
  };
  PromptKind kind = variant == TraceVariant::WithoutQA ? PromptKind::BuilderWithoutQA
                    : variant == TraceVariant::WithGT  ? PromptKind::BuilderWithGT
                                                       : PromptKind::BuilderWithQA;
  const PromptTemplate& t = templates_.get(kind);
  return finish(render_template(t.system, vars), render_template(t.user, vars),
                image_capable ? std::optional(sample.image_ref) : std::nullopt);
}

PromptText PromptKit::render_answerer_prompt(const QuestionBlock& block,
                                             std::optional<std::string_view> sample_context,
                                             std::optional<std::string> image_ref) const {
  require(block.pending(), "answerer prompt needs a pending (unanswered) question");
  TemplateVars vars{
      {"question", block.question},
      {"imagined_knowledge", block.imagined_knowledge},
      {"context", std::string(sample_context.value_or(""))},
      {"image_input", image_ref ? "1" : ""},
  };
  const PromptTemplate& t = templates_.get(PromptKind::Answerer);
  return finish(render_template(t.system, vars), render_template(t.user, vars), std::move(image_ref));
}

PromptText PromptKit::render_judge_prompt(const Sample& sample, const ReasoningTrace& trace) const {
  if (sample.gold_answers.empty()) fail(ErrorCode::MissingGold, "sample " + sample.id + " has no gold answers");
  TemplateVars vars{
      {"instruction", sample.instruction},
      {"question", sample.question.value_or("")},
      {"gold_answers", bullet_list(sample.gold_answers)},
      {"trace", render_trace(trace)},
  };
  const PromptTemplate& t = templates_.get(PromptKind::Judge);
  return finish(render_template(t.system, vars), render_template(t.user, vars), std::nullopt);
}

}  // namespace cor
