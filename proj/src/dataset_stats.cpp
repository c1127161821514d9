#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "cor/dataset.hpp"

namespace cor {

using nlohmann::json;

namespace {

constexpr TraceVariant kColumns[] = {TraceVariant::WithoutQA, TraceVariant::WithQA, TraceVariant::WithGT};

struct Accumulator {
  std::size_t records = 0;
  double steps = 0, events = 0;
  void add(double s, double e, std::size_t weight = 1) {
    records += weight;
    steps += s * static_cast<double>(weight);
    events += e * static_cast<double>(weight);
  }
  VariantStats finish() const {
    if (records == 0) return {};
    double n = static_cast<double>(records);
    return {records, steps / n, events / n};
  }
};

// Row-weighted means: weighting a per-row mean by its record count
// reproduces the mean over the union of records.
std::map<TraceVariant, VariantStats> combine(const std::vector<StatsRow>& rows) {
  std::map<TraceVariant, Accumulator> acc;
  for (const auto& row : rows)
    for (const auto& [variant, v] : row.variants) acc[variant].add(v.avg_steps, v.avg_events, v.records);
  std::map<TraceVariant, VariantStats> out;
  for (const auto& [variant, a] : acc) out[variant] = a.finish();
  return out;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

StatsTable corpus_stats(const std::vector<TraceRecord>& records, const std::vector<Sample>* samples) {
  struct Group {
    std::set<std::string> ids, images;
    std::map<TraceVariant, Accumulator> variants;
  };
  std::map<std::string, Group> groups;
  std::set<std::string> all_images;

  if (samples) {
    for (const auto& s : *samples) {
      auto& g = groups[s.source_dataset];
      g.ids.insert(s.id);
      g.images.insert(s.image_ref);
      all_images.insert(s.image_ref);
    }
  }
  for (const auto& r : records) {
    if (r.quarantined) continue;
    auto& g = groups[r.source_dataset];
    if (!samples) {
      g.ids.insert(r.sample_id);
      g.images.insert(r.image_ref);
      all_images.insert(r.image_ref);
    }
    g.variants[r.variant].add(static_cast<double>(r.trace.step_count()), static_cast<double>(r.trace.events.size()));
  }

  StatsTable table;
  for (const auto& [source, g] : groups) {
    StatsRow row;
    row.source = source;
    row.num_samples = g.ids.size();
    row.num_unique_images = g.images.size();
    for (const auto& [variant, acc] : g.variants) row.variants[variant] = acc.finish();
    table.total.num_samples += row.num_samples;
    table.images_column_sum += row.num_unique_images;
    table.rows.push_back(std::move(row));
  }
  table.total.source = "Total";
  table.total.num_unique_images = all_images.size();
  table.total.variants = combine(table.rows);
  return table;
}

StatsTable stats_from_rows(const std::vector<PublishedRow>& rows, std::optional<std::size_t> total_unique_images) {
  StatsTable table;
  for (const auto& p : rows) {
    StatsRow row;
    row.source = p.source;
    row.num_samples = p.num_samples;
    row.num_unique_images = p.num_images;
    for (const auto& [variant, avg] : p.avg_steps) row.variants[variant] = {p.num_samples, avg, avg};
    table.total.num_samples += row.num_samples;
    table.images_column_sum += row.num_unique_images;
    table.rows.push_back(std::move(row));
  }
  table.total.source = "Total";
  table.total.num_unique_images = total_unique_images.value_or(table.images_column_sum);
  table.total.variants = combine(table.rows);
  return table;
}

std::string format_thousands(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

std::string format_stats_table(const StatsTable& table, bool all_events) {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"Source", "Samples", "Images", "without QA", "with QA", "with GT"});
  auto add_row = [&](const StatsRow& row) {
    std::vector<std::string> line{row.source, format_thousands(row.num_samples), format_thousands(row.num_unique_images)};
    for (auto variant : kColumns) {
      auto it = row.variants.find(variant);
      if (it == row.variants.end() || it->second.records == 0) line.push_back("-");
      else line.push_back(fixed(all_events ? it->second.avg_events : it->second.avg_steps, 2));
    }
    cells.push_back(std::move(line));
  };
  for (const auto& row : table.rows) add_row(row);
  add_row(table.total);

  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

  std::string out;
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      std::string pad(width[c] - line[c].size(), ' ');
      if (c == 0) out += line[c] + pad;
      else out += "  " + pad + line[c];
    }
    out += '\n';
  };
  emit(cells.front());
  std::size_t total_width = width[0];
  for (std::size_t c = 1; c < width.size(); ++c) total_width += 2 + width[c];
  out += std::string(total_width, '-') + '\n';
  for (std::size_t i = 1; i + 1 < cells.size(); ++i) emit(cells[i]);
  out += std::string(total_width, '-') + '\n';
  emit(cells.back());
  return out;
}

std::string stats_csv(const StatsTable& table) {
  std::string out =
      "source,num_samples,num_unique_images,without_qa_avg_steps,with_qa_avg_steps,with_gt_avg_steps,"
      "without_qa_avg_events,with_qa_avg_events,with_gt_avg_events\n";
  auto emit = [&](const StatsRow& row) {
    out += row.source + "," + std::to_string(row.num_samples) + "," + std::to_string(row.num_unique_images);
    for (bool events : {false, true}) {
      for (auto variant : kColumns) {
        auto it = row.variants.find(variant);
        out += ",";
        if (it != row.variants.end() && it->second.records)
          out += fixed(events ? it->second.avg_events : it->second.avg_steps, 3);
      }
    }
    out += "\n";
  };
  for (const auto& row : table.rows) emit(row);
  emit(table.total);
  return out;
}

json stats_json(const StatsTable& table) {
  auto row_json = [](const StatsRow& row) {
    json variants = json::object();
    for (const auto& [variant, v] : row.variants)
      variants[std::string(to_string(variant))] = {
          {"records", v.records}, {"avg_steps", v.avg_steps}, {"avg_events", v.avg_events}};
    return json{{"source", row.source},
                {"num_samples", row.num_samples},
                {"num_unique_images", row.num_unique_images},
                {"variants", variants}};
  };
  json rows = json::array();
  for (const auto& row : table.rows) rows.push_back(row_json(row));
  return {{"rows", rows}, {"total", row_json(table.total)}, {"images_column_sum", table.images_column_sum}};
}

}  // namespace cor
