#pragma once

// Dataset construction: ingestion of annotation shims, trace generation for
// the three variants, spike-triggered question insertion, corpus statistics.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cor/backend.hpp"
#include "cor/prompts.hpp"
#include "cor/sample.hpp"
#include "cor/trace.hpp"
#include "json.hpp"

namespace cor {

// ---------------------------------------------------------------- ingestion

struct IngestWarning {
  std::string path;
  std::string message;
};

struct IngestResult {
  std::vector<Sample> samples;
  std::vector<IngestWarning> warnings;
};

// Shim layout:
//   {"source"?: tag,
//    "images":   [{"id", "file"}],
//    "captions": [{"image_id", "text"}],
//    "regions":  [{"image_id", "label", "bbox": [x,y,w,h], "dims": [w,h]}],
//    "qa":       [{"id"?, "image_id", "question", "answers": [...], "source"}]}
// Errors are SchemaError carrying a JSON path such as "images[1].id".
IngestResult ingest_caption_source(const nlohmann::json& shim);
IngestResult ingest_vqa_source(const nlohmann::json& shim);
// One sample per QA entry when the shim has "qa" (captions then serve as scene
// evidence), else one caption sample per image.
IngestResult ingest_shim(const nlohmann::json& shim);

std::optional<TaskKind> task_kind_for_source(std::string_view source_tag);

// Thin converters from raw layouts to the shim.
//   COCO captions: {"images":[{"id","file_name","width","height"}], "annotations":[{"image_id","caption"}]}
//   VQA: questions {"questions":[{"image_id","question","question_id"}]} and
//        annotations {"annotations":[{"question_id","answers":[{"answer"}]}]}
nlohmann::json coco_captions_to_shim(const nlohmann::json& coco, std::string_view image_dir = {},
                                     std::string_view source_tag = "coco_caption");
nlohmann::json vqa_to_shim(const nlohmann::json& questions, const nlohmann::json& annotations,
                           std::string_view source_tag, std::string_view image_dir = {},
                           std::string_view image_pattern = "{id}.jpg");

nlohmann::json read_json_file(const std::filesystem::path& path);
std::vector<Sample> load_samples(const std::filesystem::path& path);  // JSON array or JSONL
void save_samples(const std::filesystem::path& path, const std::vector<Sample>& samples);

// --------------------------------------------------------------- records

struct TraceRecord {
  std::string sample_id;
  std::string source_dataset;
  std::string image_ref;
  TraceVariant variant = TraceVariant::WithoutQA;
  ReasoningTrace trace;
  // Backend text of the accepted attempt. For derived WithQA records this is
  // the continuation fragment that was spliced after the prefix steps.
  std::string raw_text;
  std::vector<Violation> violations;        // structural
  std::vector<Violation> guard_violations;  // lexical
  std::string template_version;
  std::string backend_id;
  std::string created_at;
  int attempts = 1;
  bool quarantined = false;
  std::optional<int> spike_index;  // derived WithQA only
  bool derived = false;

  std::pair<std::string, TraceVariant> key() const { return {sample_id, variant}; }
};

void to_json(nlohmann::json& j, const TraceRecord& r);
void from_json(const nlohmann::json& j, TraceRecord& r);

// Serialized append-only JSONL writer. Quarantined records go to a sibling
// file so they never reach the corpus.
class CorpusWriter {
 public:
  CorpusWriter(std::filesystem::path corpus, std::filesystem::path quarantine);
  void write(const TraceRecord& record);
  std::size_t written() const;
  std::size_t quarantined() const;

 private:
  std::filesystem::path corpus_, quarantine_;
  mutable std::mutex mu_;
  std::size_t written_ = 0, quarantined_ = 0;
};

// Last write wins per (sample_id, variant); order of first appearance kept.
// Quarantined lines are dropped.
std::vector<TraceRecord> load_corpus(const std::filesystem::path& path);
std::vector<TraceRecord> dedup_records(std::vector<TraceRecord> records);

// -------------------------------------------------------------- generation

enum class ImageMode { Auto, TextOnly, Image };

struct BuildContext {
  const PromptKit* prompts = nullptr;
  LexicalPolicy lexical;
  DecodingParams params;
  // Auto: image input when the backend accepts images and the sample has no
  // scene text to describe it.
  ImageMode image_mode = ImageMode::Auto;
  std::function<std::string()> clock = utc_timestamp;
};

bool use_image_path(const Sample& sample, const ChatBackend& backend, ImageMode mode);

std::string repair_instruction(const std::vector<Violation>& violations);

// variant ∈ {WithoutQA, WithGT}. One repair round on structural failure,
// then the record comes back quarantined.
TraceRecord build_trace(const Sample& sample, TraceVariant variant, ChatBackend& backend,
                        const BuildContext& ctx);

// Fresh WithQA generation without a source trace; kept for comparison runs.
TraceRecord build_with_qa_fresh(const Sample& sample, ChatBackend& backend, const BuildContext& ctx);

// ---------------------------------------------------------------- spikes

struct SpikePolicy {
  enum class Mode { FirstSpike, AllSpikes };
  double rise_threshold = 0.3;
  double absolute_threshold = 0.7;
  Mode mode = Mode::FirstSpike;

  void validate() const;  // Precondition unless both thresholds lie in [0, 1]
};

// 1-based index of the first spike. Scores compare exactly in hundredths.
std::optional<std::size_t> detect_spike(std::span<const UncertaintyScore> scores, const SpikePolicy& policy);
// Every index where either rule fires, ascending.
std::vector<std::size_t> detect_spikes(std::span<const UncertaintyScore> scores, const SpikePolicy& policy);

struct DeriveOutcome {
  enum class Status { Derived, NoSpike };
  Status status = Status::NoSpike;
  TraceRecord record;  // valid when Derived; may be quarantined
  std::vector<std::size_t> spikes;
};

struct SpliceResult {
  std::optional<ReasoningTrace> trace;
  std::vector<Violation> violations;
};

// Joins prefix steps 1..spike-1, the continuation's single leading question
// block, and its steps renumbered from `spike`. Steps repeating a prefix
// step verbatim are dropped.
SpliceResult splice_continuation(const ReasoningTrace& original, std::size_t spike,
                                 std::string_view continuation_text);

DeriveOutcome derive_with_qa(const TraceRecord& record, const Sample& sample, const SpikePolicy& policy,
                             ChatBackend& backend, const BuildContext& ctx);

// ----------------------------------------------------------------- stats

struct VariantStats {
  std::size_t records = 0;
  double avg_steps = 0;   // Step events only
  double avg_events = 0;  // Step events plus question blocks
};

struct StatsRow {
  std::string source;
  std::size_t num_samples = 0;
  std::size_t num_unique_images = 0;
  std::map<TraceVariant, VariantStats> variants;
};

struct StatsTable {
  std::vector<StatsRow> rows;  // sorted by source
  StatsRow total;
  std::size_t images_column_sum = 0;
};

// Quarantined records are skipped. With `samples`, row counts come from the
// sample list; otherwise from the distinct sample ids and image refs of the
// records. Total averages weight each row by its record count, which equals
// the mean over the union of records.
StatsTable corpus_stats(const std::vector<TraceRecord>& records, const std::vector<Sample>* samples = nullptr);

// Builds a table from already-aggregated rows (e.g. published figures).
// Averages in the Total row are weighted by num_samples. Unique images cannot
// be recovered from overlapping rows, so a known total may be supplied.
struct PublishedRow {
  std::string source;
  std::size_t num_samples = 0;
  std::size_t num_images = 0;
  std::map<TraceVariant, double> avg_steps;
};
StatsTable stats_from_rows(const std::vector<PublishedRow>& rows,
                           std::optional<std::size_t> total_unique_images = std::nullopt);

std::string format_thousands(std::size_t n);
// Fixed-width text table; counts get thousands separators, averages 2 decimals.
std::string format_stats_table(const StatsTable& table, bool all_events = false);
std::string stats_csv(const StatsTable& table);
nlohmann::json stats_json(const StatsTable& table);

}  // namespace cor
