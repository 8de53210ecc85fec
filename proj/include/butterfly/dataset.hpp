#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "butterfly/box.hpp"

namespace butterfly::data {

enum class ImageKind { Ecological, Pattern };

std::string_view kind_name(ImageKind kind);

struct SpeciesBox {
  std::string species;
  BoundingBox box;

  friend bool operator==(const SpeciesBox&, const SpeciesBox&) = default;
};

// One annotated image. Ecological photos carry one box per butterfly;
// pattern photos carry exactly one box covering the whole frame.
struct AnnotatedImage {
  std::string image_id;
  std::string path;  // relative to the manifest's image root
  ImageKind kind = ImageKind::Ecological;
  int width = 0;
  int height = 0;
  std::vector<SpeciesBox> boxes;

  friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) =
      default;
};

struct DatasetManifest {
  std::vector<AnnotatedImage> records;
  std::string label;       // provenance tag, e.g. "train(seed=7)"
  std::uint64_t seed = 0;  // seed used for any randomized construction

  bool empty() const { return records.empty(); }
  std::size_t size() const { return records.size(); }
};

// species -> number of images containing it, ordered by descending
// count (ties by ascending species id).
struct SpeciesHistogram {
  std::vector<std::pair<std::string, int>> entries;
};

enum class TrainsetStrategy { AllPatterns, MatchedPatterns };

// Throws Error on invariant violations, naming the offending image_id.
void validate_record(const AnnotatedImage& rec);
void validate_manifest(const DatasetManifest& m);

// JSON-lines I/O. One object per line with fields image_id, path, kind,
// width, height, boxes[{species, x_min, y_min, x_max, y_max}]. Pattern
// records may omit boxes and give a top-level "species" instead; the
// full-image box is synthesized on load.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

SpeciesHistogram species_histogram(const DatasetManifest& m);

// Species with only one image are dropped: their boxes are removed and
// records left with no boxes are discarded.
DatasetManifest remove_singletons(const DatasetManifest& m);

// Per-species 50/50 split, train takes the ceil half. Images with
// several species are assigned by their first-listed species.
std::pair<DatasetManifest, DatasetManifest> split_stratified(
    const DatasetManifest& m, std::uint64_t seed);

DatasetManifest build_training_set(const DatasetManifest& eco_train,
                                   const DatasetManifest& patterns,
                                   TrainsetStrategy strategy);

// All species occurring in any box of the manifest, ascending.
std::set<std::string> species_set(const DatasetManifest& m);

// Rewrites record paths so that files previously addressed relative to
// old_root resolve relative to new_root. Purely lexical.
DatasetManifest rebase_paths(const DatasetManifest& m,
                             const std::filesystem::path& old_root,
                             const std::filesystem::path& new_root);

}  // namespace butterfly::data
