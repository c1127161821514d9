#include "cor/evaluator.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cor/errors.hpp"
#include "cor/text.hpp"

namespace cor {

using nlohmann::json;

std::string_view to_string(JudgeKind kind) { return kind == JudgeKind::LlmJudge ? "llm" : "oracle"; }

void to_json(json& j, const JudgeResult& r) {
  j = json{{"sample_id", r.sample_id},
           {"source_dataset", r.source_dataset},
           {"system_label", r.system_label},
           {"extracted_answer", r.extracted_answer},
           {"score", r.score},
           {"judge_kind", to_string(r.judge_kind)},
           {"raw_judge_output", r.raw_judge_output},
           {"judge_id", r.judge_id}};
}

void from_json(const json& j, JudgeResult& r) {
  r.sample_id = j.at("sample_id").get<std::string>();
  r.source_dataset = j.value("source_dataset", "");
  r.system_label = j.value("system_label", "");
  r.extracted_answer = j.value("extracted_answer", "");
  r.score = j.at("score").get<int>();
  if (r.score < 1 || r.score > 4) fail(ErrorCode::ScoreOutOfRange, "stored score outside 1-4 for " + r.sample_id);
  r.judge_kind = j.value("judge_kind", "oracle") == "llm" ? JudgeKind::LlmJudge : JudgeKind::OracleJudge;
  r.raw_judge_output = j.value("raw_judge_output", "");
  r.judge_id = j.value("judge_id", "");
}

// ------------------------------------------------------------------- judges

namespace {

// First parseable JSON object embedded in `text`.
std::optional<json> first_json_object(std::string_view text) {
  for (std::size_t open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
    for (std::size_t close = text.rfind('}'); close != std::string_view::npos && close > open;
         close = text.rfind('}', close - 1)) {
      json j = json::parse(text.substr(open, close - open + 1), nullptr, false);
      if (!j.is_discarded() && j.is_object()) return j;
    }
  }
  return std::nullopt;
}

std::optional<double> numeric(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    std::string s(text::trim(v.get<std::string>()));
    char* end = nullptr;
    double d = std::strtod(s.c_str(), &end);
    if (!s.empty() && end == s.c_str() + s.size()) return d;
  }
  return std::nullopt;
}

struct Verdict {
  std::optional<JudgeResult> result;
  ErrorCode error = ErrorCode::JudgeParseError;
  std::string message;
};

Verdict read_verdict(std::string_view raw) {
  Verdict v;
  auto j = first_json_object(raw);
  if (!j) {
    v.message = "judge output has no JSON object";
    return v;
  }
  if (!j->contains("score")) {
    v.message = "judge output lacks \"score\"";
    return v;
  }
  auto score = numeric((*j)["score"]);
  if (!score || std::floor(*score) != *score) {
    v.message = "judge score is not an integer";
    return v;
  }
  if (*score < 1 || *score > 4) {
    v.error = ErrorCode::ScoreOutOfRange;
    v.message = "judge score " + (*j)["score"].dump() + " outside 1-4";
    return v;
  }
  if (!j->contains("answer") || !(*j)["answer"].is_string()) {
    v.message = "judge output lacks a string \"answer\"";
    return v;
  }
  JudgeResult r;
  r.score = static_cast<int>(*score);
  r.extracted_answer = std::string(text::trim((*j)["answer"].get<std::string>()));
  v.result = std::move(r);
  return v;
}

}  // namespace

JudgeResult judge(const Sample& sample, const ReasoningTrace& trace, ChatBackend& backend, const PromptKit& prompts,
                  const JudgeOptions& options) {
  ChatRequest request = make_request(prompts.render_judge_prompt(sample, trace), options.params);
  Verdict v;
  std::string raw;
  for (int attempt = 1; attempt <= 2; ++attempt) {
    raw = backend.complete(request).text;
    v = read_verdict(raw);
    if (v.result) break;
    if (attempt == 1)
      append_followup(request, raw,
                      v.message + ". Reply with only {\"answer\": \"<extracted answer>\", \"score\": <1, 2, 3 or 4>}.");
  }
  if (!v.result) fail(v.error, v.message + " (sample " + sample.id + ")");
  JudgeResult r = *v.result;
  r.sample_id = sample.id;
  r.source_dataset = sample.source_dataset;
  r.system_label = options.system_label;
  r.judge_kind = JudgeKind::LlmJudge;
  r.raw_judge_output = raw;
  r.judge_id = backend.id();
  return r;
}

std::string normalize_answer(std::string_view answer) {
  std::string s = text::lower(text::collapse_whitespace(answer));
  for (std::string_view article : {"a ", "an ", "the "}) {
    if (s.starts_with(article)) {
      s.erase(0, article.size());
      break;
    }
  }
  return s;
}

std::string extract_answer(const ReasoningTrace& trace) {
  if (trace.final_answer) return std::string(text::trim(*trace.final_answer));
  auto steps = trace.steps();
  if (!steps.empty()) return std::string(text::trim(steps.back()->text));
  return {};
}

JudgeResult oracle_judge(const Sample& sample, const ReasoningTrace& trace, std::string system_label) {
  if (sample.gold_answers.empty()) fail(ErrorCode::MissingGold, "sample " + sample.id + " has no gold answers");
  JudgeResult r;
  r.sample_id = sample.id;
  r.source_dataset = sample.source_dataset;
  r.system_label = std::move(system_label);
  r.judge_kind = JudgeKind::OracleJudge;
  r.judge_id = "oracle";
  r.extracted_answer = extract_answer(trace);
  std::string got = normalize_answer(r.extracted_answer);
  r.score = 1;
  if (got.empty()) return r;
  for (const auto& gold : sample.gold_answers) {
    std::string want = normalize_answer(gold);
    if (want.empty()) continue;
    if (want == got) {
      r.score = 4;
      break;
    }
    if (got.find(want) != std::string::npos || want.find(got) != std::string::npos) r.score = 2;
  }
  return r;
}

// -------------------------------------------------------------- aggregation

const ScoreCell* ScoreTable::cell(const std::string& system, const std::string& dataset) const {
  auto it = cells.find({system, dataset});
  return it == cells.end() ? nullptr : &it->second;
}

namespace {

void remember(std::vector<std::string>& order, const std::string& name) {
  if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
}

void recompute_overall(ScoreTable& t) {
  t.overall.clear();
  for (const auto& system : t.systems) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& dataset : t.datasets) {
      if (const auto* c = t.cell(system, dataset)) {
        sum += c->mean;
        ++n;
      }
    }
    if (n) t.overall[system] = sum / static_cast<double>(n);
  }
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

ScoreTable aggregate(const std::vector<JudgeResult>& results) {
  ScoreTable t;
  std::map<std::pair<std::string, std::string>, long long> sums;
  for (const auto& r : results) {
    remember(t.systems, r.system_label);
    remember(t.datasets, r.source_dataset);
    sums[{r.system_label, r.source_dataset}] += r.score;
    t.cells[{r.system_label, r.source_dataset}].count += 1;
  }
  for (auto& [key, cell] : t.cells) cell.mean = static_cast<double>(sums[key]) / static_cast<double>(cell.count);
  recompute_overall(t);
  return t;
}

void add_means_row(ScoreTable& table, const std::string& system,
                   const std::vector<std::pair<std::string, double>>& means) {
  remember(table.systems, system);
  for (const auto& [dataset, mean] : means) {
    remember(table.datasets, dataset);
    table.cells[{system, dataset}] = {mean, 0};
  }
  recompute_overall(table);
}

void to_json(json& j, const ScoreTable& t) {
  json cells = json::array();
  for (const auto& [key, cell] : t.cells)
    cells.push_back({{"system", key.first}, {"dataset", key.second}, {"mean", cell.mean}, {"count", cell.count}});
  j = json{{"datasets", t.datasets}, {"systems", t.systems}, {"cells", cells}, {"overall", t.overall}};
}

void from_json(const json& j, ScoreTable& t) {
  t.datasets = j.at("datasets").get<std::vector<std::string>>();
  t.systems = j.at("systems").get<std::vector<std::string>>();
  t.cells.clear();
  for (const auto& c : j.at("cells"))
    t.cells[{c.at("system").get<std::string>(), c.at("dataset").get<std::string>()}] = {
        c.at("mean").get<double>(), c.at("count").get<std::size_t>()};
  t.overall = j.at("overall").get<std::map<std::string, double>>();
}

std::string format_score_table(const ScoreTable& table, int decimals) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"System"};
  header.insert(header.end(), table.datasets.begin(), table.datasets.end());
  header.push_back("Average");
  rows.push_back(header);
  for (const auto& system : table.systems) {
    std::vector<std::string> row{system};
    for (const auto& dataset : table.datasets) {
      const auto* c = table.cell(system, dataset);
      row.push_back(c ? fixed(c->mean, decimals) : "-");
    }
    auto it = table.overall.find(system);
    row.push_back(it == table.overall.end() ? "-" : fixed(it->second, decimals));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      std::string pad(width[c] - rows[r][c].size(), ' ');
      out += c == 0 ? rows[r][c] + pad : "  " + pad + rows[r][c];
    }
    out += '\n';
    if (r == 0) {
      std::size_t total = width[0];
      for (std::size_t c = 1; c < width.size(); ++c) total += 2 + width[c];
      out += std::string(total, '-') + '\n';
    }
  }
  return out;
}

std::string score_csv(const ScoreTable& table) {
  std::string out = "system";
  for (const auto& d : table.datasets) out += "," + d;
  out += ",average\n";
  for (const auto& system : table.systems) {
    out += system;
    for (const auto& dataset : table.datasets) {
      out += ",";
      if (const auto* c = table.cell(system, dataset)) out += fixed(c->mean, 3);
    }
    out += ",";
    if (auto it = table.overall.find(system); it != table.overall.end()) out += fixed(it->second, 3);
    out += "\n";
  }
  return out;
}

void append_judge_results(const std::filesystem::path& path, const std::vector<JudgeResult>& results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot append to " + path.string());
  for (const auto& r : results) out << json(r).dump() << "\n";
}

std::vector<JudgeResult> load_judge_results(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::vector<JudgeResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line).get<JudgeResult>());
    } catch (const json::exception& e) {
      throw SchemaError(path.string() + ":" + std::to_string(line_no), e.what());
    }
  }
  return out;
}

}  // namespace cor
