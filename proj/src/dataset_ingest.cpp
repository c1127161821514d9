#include <fstream>
#include <map>
#include <sstream>

#include "cor/dataset.hpp"
#include "cor/errors.hpp"
#include "cor/serialize.hpp"
#include "cor/text.hpp"

namespace cor {

using nlohmann::json;

namespace {

std::string at_index(const std::string& array, std::size_t i) { return array + "[" + std::to_string(i) + "]"; }

// Ids may be numbers in raw dumps; both forms map to the same string.
std::string id_field(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError(path + "." + key, "missing");
  const json& v = obj[key];
  if (v.is_string() && !v.get<std::string>().empty()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw SchemaError(path + "." + key, "expected a non-empty string or integer");
}

std::string string_field(const json& obj, const std::string& key, const std::string& path, bool allow_empty = false) {
  if (!obj.contains(key)) throw SchemaError(path + "." + key, "missing");
  const json& v = obj[key];
  if (!v.is_string()) throw SchemaError(path + "." + key, "expected a string");
  auto s = std::string(text::trim(v.get<std::string>()));
  if (s.empty() && !allow_empty) throw SchemaError(path + "." + key, "must not be empty");
  return s;
}

std::vector<double> number_array(const json& obj, const std::string& key, const std::string& path, std::size_t n) {
  if (!obj.contains(key)) throw SchemaError(path + "." + key, "missing");
  const json& v = obj[key];
  if (!v.is_array() || v.size() != n) throw SchemaError(path + "." + key, "expected " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw SchemaError(path + "." + key, "expected " + std::to_string(n) + " numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

const json& optional_array(const json& shim, const std::string& key) {
  static const json empty = json::array();
  if (!shim.contains(key)) return empty;
  if (!shim[key].is_array()) throw SchemaError(key, "expected an array");
  return shim[key];
}

struct ImageIndex {
  std::vector<std::string> order;
  std::map<std::string, std::string> files;
  std::map<std::string, std::vector<std::string>> captions;
  std::map<std::string, std::vector<RegionAnnotation>> regions;
};

ImageIndex index_images(const json& shim, std::vector<IngestWarning>& warnings) {
  if (!shim.is_object()) throw SchemaError("", "annotation file must be a JSON object");
  ImageIndex idx;
  const json& images = optional_array(shim, "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::string path = at_index("images", i);
    std::string id = id_field(images[i], "id", path);
    std::string file = string_field(images[i], "file", path);
    if (idx.files.count(id)) throw SchemaError(path + ".id", "duplicate image id '" + id + "'");
    idx.files[id] = file;
    idx.order.push_back(id);
  }
  auto known = [&](const json& entry, const std::string& path) {
    std::string id = id_field(entry, "image_id", path);
    if (!idx.files.count(id)) throw SchemaError(path + ".image_id", "unknown image '" + id + "'");
    return id;
  };
  const json& captions = optional_array(shim, "captions");
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::string path = at_index("captions", i);
    std::string id = known(captions[i], path);
    idx.captions[id].push_back(string_field(captions[i], "text", path));
  }
  const json& regions = optional_array(shim, "regions");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    std::string path = at_index("regions", i);
    std::string id = known(regions[i], path);
    RegionAnnotation r;
    r.label = string_field(regions[i], "label", path);
    auto b = number_array(regions[i], "bbox", path, 4);
    auto d = number_array(regions[i], "dims", path, 2);
    r.bbox = {b[0], b[1], b[2], b[3]};
    r.source_dims = {d[0], d[1]};
    if (!r.valid()) {
      warnings.push_back({path, "region lies outside its image; dropped"});
      continue;
    }
    idx.regions[id].push_back(std::move(r));
  }
  return idx;
}

std::string instruction_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::Caption: return "Describe the image in detail.";
    case TaskKind::VQA: return "Answer the question about the image.";
    case TaskKind::KnowledgeVQA: return "Answer the question about the image using common-sense or world knowledge.";
    case TaskKind::EntityVQA: return "Identify the specific entity the question asks about.";
  }
  return {};
}

}  // namespace

std::optional<TaskKind> task_kind_for_source(std::string_view tag) {
  static const std::map<std::string, TaskKind, std::less<>> kinds{
      {"vqa_v2", TaskKind::VQA},
      {"visual_genome", TaskKind::VQA},
      {"okvqa", TaskKind::KnowledgeVQA},
      {"aokvqa", TaskKind::KnowledgeVQA},
      {"encyclopedic_vqa", TaskKind::EntityVQA},
      {"oven", TaskKind::EntityVQA},
  };
  auto it = kinds.find(text::lower(tag));
  if (it == kinds.end()) return std::nullopt;
  return it->second;
}

IngestResult ingest_caption_source(const json& shim) {
  IngestResult result;
  ImageIndex idx = index_images(shim, result.warnings);
  std::string source = "coco_caption";
  if (shim.contains("source")) source = string_field(shim, "source", "");
  for (const auto& id : idx.order) {
    Sample s;
    s.id = "cap:" + id;
    s.image_ref = idx.files[id];
    s.task_kind = TaskKind::Caption;
    s.instruction = instruction_for(TaskKind::Caption);
    s.captions = idx.captions[id];
    s.regions = idx.regions[id];
    // Reference captions double as gold answers for judging and with-GT.
    s.gold_answers = s.captions;
    s.source_dataset = source;
    if (s.captions.empty()) result.warnings.push_back({"images", "image '" + id + "' has no captions"});
    result.samples.push_back(std::move(s));
  }
  return result;
}

IngestResult ingest_vqa_source(const json& shim) {
  IngestResult result;
  ImageIndex idx = index_images(shim, result.warnings);
  std::optional<std::string> default_source;
  if (shim.contains("source")) default_source = string_field(shim, "source", "");
  const json& qa = optional_array(shim, "qa");
  std::map<std::string, int> per_image;
  std::map<std::string, std::size_t> seen_ids;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    std::string path = at_index("qa", i);
    const json& e = qa[i];
    if (!e.is_object()) throw SchemaError(path, "expected an object");
    std::string image = id_field(e, "image_id", path);
    if (!idx.files.count(image)) throw SchemaError(path + ".image_id", "unknown image '" + image + "'");

    std::string source;
    if (e.contains("source")) source = string_field(e, "source", path);
    else if (default_source) source = *default_source;
    else throw SchemaError(path + ".source", "missing");
    auto kind = task_kind_for_source(source);
    if (!kind) throw SchemaError(path + ".source", "unknown source tag '" + source + "'");

    Sample s;
    int n = per_image[image]++;
    s.id = e.contains("id") ? "qa:" + id_field(e, "id", path) : "qa:" + image + ":" + std::to_string(n);
    if (auto [it, inserted] = seen_ids.emplace(s.id, i); !inserted)
      throw SchemaError(path + ".id", "duplicate sample id '" + s.id + "'");
    s.image_ref = idx.files[image];
    s.task_kind = *kind;
    s.instruction = instruction_for(*kind);
    s.question = string_field(e, "question", path);
    if (!e.contains("answers") || !e["answers"].is_array()) throw SchemaError(path + ".answers", "expected an array");
    for (std::size_t a = 0; a < e["answers"].size(); ++a) {
      const json& ans = e["answers"][a];
      if (!ans.is_string()) throw SchemaError(at_index(path + ".answers", a), "expected a string");
      std::string t(text::trim(ans.get<std::string>()));
      if (!t.empty()) s.gold_answers.push_back(std::move(t));
    }
    if (s.gold_answers.empty()) result.warnings.push_back({path + ".answers", "no gold answers"});
    s.captions = idx.captions[image];
    s.regions = idx.regions[image];
    s.source_dataset = text::lower(source);
    result.samples.push_back(std::move(s));
  }
  return result;
}

IngestResult ingest_shim(const json& shim) {
  if (shim.is_object() && shim.contains("qa")) return ingest_vqa_source(shim);
  return ingest_caption_source(shim);
}

namespace {

std::string join_path(std::string_view dir, std::string_view file) {
  if (dir.empty()) return std::string(file);
  std::string out(dir);
  if (out.back() != '/') out += '/';
  return out + std::string(file);
}

std::string raw_id(const json& v, const std::string& path) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw SchemaError(path, "expected a string or integer id");
}

}  // namespace

json coco_captions_to_shim(const json& coco, std::string_view image_dir, std::string_view source_tag) {
  if (!coco.is_object() || !coco.contains("images")) throw SchemaError("images", "missing");
  json shim{{"source", source_tag}, {"images", json::array()}, {"captions", json::array()}, {"regions", json::array()}};
  std::map<std::string, std::pair<double, double>> dims;
  for (std::size_t i = 0; i < coco["images"].size(); ++i) {
    const json& img = coco["images"][i];
    std::string path = at_index("images", i);
    std::string id = raw_id(img.value("id", json()), path + ".id");
    shim["images"].push_back({{"id", id}, {"file", join_path(image_dir, string_field(img, "file_name", path))}});
    if (img.contains("width") && img.contains("height"))
      dims[id] = {img["width"].get<double>(), img["height"].get<double>()};
  }
  std::map<long long, std::string> categories;
  if (coco.contains("categories"))
    for (const auto& c : coco["categories"]) categories[c.at("id").get<long long>()] = c.at("name").get<std::string>();
  if (coco.contains("annotations")) {
    for (std::size_t i = 0; i < coco["annotations"].size(); ++i) {
      const json& a = coco["annotations"][i];
      std::string path = at_index("annotations", i);
      std::string image = raw_id(a.value("image_id", json()), path + ".image_id");
      if (a.contains("caption"))
        shim["captions"].push_back({{"image_id", image}, {"text", a["caption"]}});
      if (a.contains("bbox") && a.contains("category_id") && dims.count(image)) {
        auto label = categories.find(a["category_id"].get<long long>());
        if (label == categories.end()) continue;
        shim["regions"].push_back({{"image_id", image},
                                   {"label", label->second},
                                   {"bbox", a["bbox"]},
                                   {"dims", {dims[image].first, dims[image].second}}});
      }
    }
  }
  return shim;
}

json vqa_to_shim(const json& questions, const json& annotations, std::string_view source_tag,
                 std::string_view image_dir, std::string_view image_pattern) {
  if (!questions.is_object() || !questions.contains("questions")) throw SchemaError("questions", "missing");
  std::map<std::string, std::vector<std::string>> answers;
  if (annotations.is_object() && annotations.contains("annotations")) {
    for (std::size_t i = 0; i < annotations["annotations"].size(); ++i) {
      const json& a = annotations["annotations"][i];
      std::string qid = raw_id(a.value("question_id", json()), at_index("annotations", i) + ".question_id");
      for (const auto& ans : a.value("answers", json::array())) {
        if (ans.is_string()) answers[qid].push_back(ans.get<std::string>());
        else if (ans.is_object() && ans.contains("answer")) answers[qid].push_back(ans["answer"].get<std::string>());
      }
    }
  }
  json shim{{"images", json::array()}, {"qa", json::array()}};
  std::map<std::string, bool> images;
  for (std::size_t i = 0; i < questions["questions"].size(); ++i) {
    const json& q = questions["questions"][i];
    std::string path = at_index("questions", i);
    std::string image = raw_id(q.value("image_id", json()), path + ".image_id");
    std::string qid = raw_id(q.value("question_id", json()), path + ".question_id");
    if (!images.count(image)) {
      images[image] = true;
      shim["images"].push_back(
          {{"id", image}, {"file", join_path(image_dir, text::replace_all(std::string(image_pattern), "{id}", image))}});
    }
    shim["qa"].push_back({{"id", qid},
                          {"image_id", image},
                          {"question", q.at("question")},
                          {"answers", answers[qid]},
                          {"source", source_tag}});
  }
  return shim;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError("", path.string() + " is not valid JSON: " + e.what());
  }
}

std::vector<Sample> load_samples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  std::string content = buf.str();
  std::vector<Sample> out;
  auto first = content.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && content[first] == '[') return json::parse(content).get<std::vector<Sample>>();
    std::size_t line_no = 0;
    for (auto line : text::split_lines(content)) {
      ++line_no;
      if (text::trim(line).empty()) continue;
      out.push_back(json::parse(line).get<Sample>());
    }
  } catch (const json::exception& e) {
    throw SchemaError(path.string(), e.what());
  }
  return out;
}

void save_samples(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << json(samples).dump(2) << "\n";
}

}  // namespace cor
