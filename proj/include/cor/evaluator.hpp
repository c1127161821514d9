#pragma once

// Scoring of completed traces on the 1-4 rubric and per-dataset aggregation.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cor/backend.hpp"
#include "cor/prompts.hpp"
#include "cor/sample.hpp"
#include "cor/trace.hpp"
#include "json.hpp"

namespace cor {

enum class JudgeKind { LlmJudge, OracleJudge };
std::string_view to_string(JudgeKind kind);

struct JudgeResult {
  std::string sample_id;
  std::string source_dataset;
  std::string system_label;
  std::string extracted_answer;
  int score = 1;  // 1 incorrect, 2 partially, 3 mostly, 4 correct
  JudgeKind judge_kind = JudgeKind::OracleJudge;
  std::string raw_judge_output;
  std::string judge_id;

  friend bool operator==(const JudgeResult&, const JudgeResult&) = default;
};

void to_json(nlohmann::json& j, const JudgeResult& r);
void from_json(const nlohmann::json& j, JudgeResult& r);

struct JudgeOptions {
  DecodingParams params{0.0, 256, ResponseFormat::Json};
  std::string system_label;
};

// Parses {"answer", "score"}; the score is checked first. Throws
// JudgeParseError or ScoreOutOfRange, each after one repair round.
JudgeResult judge(const Sample& sample, const ReasoningTrace& trace, ChatBackend& backend, const PromptKit& prompts,
                  const JudgeOptions& options = {});

// Lowercase, collapse whitespace, strip one leading article.
std::string normalize_answer(std::string_view answer);
std::string extract_answer(const ReasoningTrace& trace);
// 4 on normalized equality with any gold, 2 on containment either way, else 1.
JudgeResult oracle_judge(const Sample& sample, const ReasoningTrace& trace, std::string system_label = {});

struct ScoreCell {
  double mean = 0;
  std::size_t count = 0;
  friend bool operator==(const ScoreCell&, const ScoreCell&) = default;
};

struct ScoreTable {
  std::vector<std::string> datasets;  // column order
  std::vector<std::string> systems;   // row order
  std::map<std::pair<std::string, std::string>, ScoreCell> cells;  // (system, dataset)
  std::map<std::string, double> overall;  // unweighted mean of the system's dataset means

  const ScoreCell* cell(const std::string& system, const std::string& dataset) const;
  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

// Rows and columns keep first-appearance order. Empty cells are omitted.
ScoreTable aggregate(const std::vector<JudgeResult>& results);

// A row of already-computed dataset means (e.g. published figures).
void add_means_row(ScoreTable& table, const std::string& system,
                   const std::vector<std::pair<std::string, double>>& means);

void to_json(nlohmann::json& j, const ScoreTable& t);
void from_json(const nlohmann::json& j, ScoreTable& t);

std::string format_score_table(const ScoreTable& table, int decimals = 3);
std::string score_csv(const ScoreTable& table);

void append_judge_results(const std::filesystem::path& path, const std::vector<JudgeResult>& results);
std::vector<JudgeResult> load_judge_results(const std::filesystem::path& path);

}  // namespace cor
