#include "butterfly/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "butterfly/error.hpp"
#include "butterfly/rng.hpp"

namespace butterfly::data {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string_view kind_name(ImageKind kind) {
  return kind == ImageKind::Ecological ? "ecological" : "pattern";
}

void validate_record(const AnnotatedImage& rec) {
  if (rec.image_id.empty()) throw Error("record with empty image_id");
  if (rec.width <= 0 || rec.height <= 0)
    throw Error("record '" + rec.image_id + "': non-positive dimensions");
  if (rec.boxes.empty())
    throw Error("record '" + rec.image_id + "': no boxes");
  for (const auto& sb : rec.boxes) {
    if (sb.species.empty())
      throw Error("record '" + rec.image_id + "': box with empty species");
    if (!sb.box.valid_within(rec.width, rec.height))
      throw Error("record '" + rec.image_id + "': box (" +
                  std::to_string(sb.box.x_min) + "," +
                  std::to_string(sb.box.y_min) + "," +
                  std::to_string(sb.box.x_max) + "," +
                  std::to_string(sb.box.y_max) + ") violates 0 <= min < max <= extent");
  }
  if (rec.kind == ImageKind::Pattern) {
    if (rec.boxes.size() != 1)
      throw Error("record '" + rec.image_id + "': pattern photo must have exactly one box");
    const BoundingBox full{0, 0, rec.width, rec.height};
    if (rec.boxes[0].box != full)
      throw Error("record '" + rec.image_id + "': pattern box must cover the full image");
  }
}

void validate_manifest(const DatasetManifest& m) {
  std::unordered_set<std::string> ids;
  ids.reserve(m.records.size());
  for (const auto& rec : m.records) {
    validate_record(rec);
    if (!ids.insert(rec.image_id).second)
      throw Error("duplicate image_id '" + rec.image_id + "'");
  }
}

namespace {

AnnotatedImage record_from_json(const ordered_json& j) {
  AnnotatedImage rec;
  rec.image_id = j.at("image_id").get<std::string>();
  rec.path = j.at("path").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "ecological") {
    rec.kind = ImageKind::Ecological;
  } else if (kind == "pattern") {
    rec.kind = ImageKind::Pattern;
  } else {
    throw Error("record '" + rec.image_id + "': unknown kind '" + kind + "'");
  }
  rec.width = j.at("width").get<int>();
  rec.height = j.at("height").get<int>();
  if (j.contains("boxes")) {
    for (const auto& bj : j.at("boxes")) {
      SpeciesBox sb;
      sb.species = bj.at("species").get<std::string>();
      sb.box = {bj.at("x_min").get<int>(), bj.at("y_min").get<int>(),
                bj.at("x_max").get<int>(), bj.at("y_max").get<int>()};
      rec.boxes.push_back(std::move(sb));
    }
  }
  // Pattern records may omit boxes: the butterfly position defaults to
  // the full frame. The species then comes from the record level.
  if (rec.boxes.empty() && rec.kind == ImageKind::Pattern &&
      j.contains("species")) {
    rec.boxes.push_back({j.at("species").get<std::string>(),
                         BoundingBox{0, 0, rec.width, rec.height}});
  }
  return rec;
}

ordered_json record_to_json(const AnnotatedImage& rec) {
  ordered_json j;
  j["image_id"] = rec.image_id;
  j["path"] = rec.path;
  j["kind"] = std::string(kind_name(rec.kind));
  j["width"] = rec.width;
  j["height"] = rec.height;
  ordered_json boxes = ordered_json::array();
  for (const auto& sb : rec.boxes) {
    ordered_json bj;
    bj["species"] = sb.species;
    bj["x_min"] = sb.box.x_min;
    bj["y_min"] = sb.box.y_min;
    bj["x_max"] = sb.box.x_max;
    bj["y_max"] = sb.box.y_max;
    boxes.push_back(std::move(bj));
  }
  j["boxes"] = std::move(boxes);
  return j;
}

// Per-image unique species occurrences.
std::unordered_map<std::string, int> species_counts(const DatasetManifest& m) {
  std::unordered_map<std::string, int> counts;
  std::unordered_set<std::string> seen;
  for (const auto& rec : m.records) {
    seen.clear();
    for (const auto& sb : rec.boxes) {
      if (seen.insert(sb.species).second) ++counts[sb.species];
    }
  }
  return counts;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.label = path.stem().string();
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
      m.records.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " +
                  e.what());
    }
  }
  validate_manifest(m);
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest: " + path.string());
  for (const auto& rec : m.records) out << record_to_json(rec).dump() << "\n";
  if (!out) throw Error("write failed: " + path.string());
}

SpeciesHistogram species_histogram(const DatasetManifest& m) {
  if (m.empty()) throw Error("species_histogram: empty manifest");
  auto counts = species_counts(m);
  SpeciesHistogram h;
  h.entries.assign(counts.begin(), counts.end());
  std::sort(h.entries.begin(), h.entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return h;
}

DatasetManifest remove_singletons(const DatasetManifest& m) {
  auto counts = species_counts(m);
  DatasetManifest out;
  out.label = m.label;
  out.seed = m.seed;
  for (const auto& rec : m.records) {
    AnnotatedImage kept = rec;
    std::erase_if(kept.boxes, [&](const SpeciesBox& sb) {
      return counts.at(sb.species) < 2;
    });
    if (!kept.boxes.empty()) out.records.push_back(std::move(kept));
  }
  return out;
}

std::pair<DatasetManifest, DatasetManifest> split_stratified(
    const DatasetManifest& m, std::uint64_t seed) {
  // Group record indices by first-listed species, in manifest order.
  std::map<std::string, std::vector<std::size_t>> by_species;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& rec = m.records[i];
    if (rec.boxes.empty())
      throw Error("split: record '" + rec.image_id + "' has no boxes");
    by_species[rec.boxes.front().species].push_back(i);
  }

  std::vector<char> in_train(m.records.size(), 0);
  for (auto& [species, indices] : by_species) {
    rng::SplitMix64 g(rng::derive_seed(seed, species));
    rng::shuffle(indices, g);
    const std::size_t n_train = (indices.size() + 1) / 2;  // ceil
    for (std::size_t k = 0; k < n_train; ++k) in_train[indices[k]] = 1;
  }

  DatasetManifest train, test;
  train.label = "train(seed=" + std::to_string(seed) + ",first-species)";
  test.label = "test(seed=" + std::to_string(seed) + ",first-species)";
  train.seed = seed;
  test.seed = seed;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    (in_train[i] ? train : test).records.push_back(m.records[i]);
  }
  return {std::move(train), std::move(test)};
}

DatasetManifest build_training_set(const DatasetManifest& eco_train,
                                   const DatasetManifest& patterns,
                                   TrainsetStrategy strategy) {
  for (const auto& rec : patterns.records) {
    if (rec.kind != ImageKind::Pattern)
      throw Error("build_training_set: record '" + rec.image_id +
                  "' is not a pattern photo");
  }
  DatasetManifest out;
  out.seed = eco_train.seed;
  out.records = eco_train.records;
  if (strategy == TrainsetStrategy::AllPatterns) {
    out.label = "trainset(all-patterns)";
    out.records.insert(out.records.end(), patterns.records.begin(),
                       patterns.records.end());
  } else {
    out.label = "trainset(matched-patterns)";
    const auto eco_species = species_set(eco_train);
    for (const auto& rec : patterns.records) {
      if (eco_species.contains(rec.boxes.front().species))
        out.records.push_back(rec);
    }
  }
  return out;
}

std::set<std::string> species_set(const DatasetManifest& m) {
  std::set<std::string> s;
  for (const auto& rec : m.records)
    for (const auto& sb : rec.boxes) s.insert(sb.species);
  return s;
}

DatasetManifest rebase_paths(const DatasetManifest& m, const fs::path& old_root,
                             const fs::path& new_root) {
  const fs::path from = fs::absolute(old_root).lexically_normal();
  const fs::path to = fs::absolute(new_root).lexically_normal();
  DatasetManifest out = m;
  for (auto& rec : out.records) {
    const fs::path abs = (from / rec.path).lexically_normal();
    rec.path = abs.lexically_relative(to).generic_string();
  }
  return out;
}

}  // namespace butterfly::data
