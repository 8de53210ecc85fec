#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "butterfly/dataset.hpp"
#include "butterfly/error.hpp"
#include "support/temp_dir.hpp"

using namespace butterfly;
using data::AnnotatedImage;
using data::DatasetManifest;
using data::ImageKind;

namespace {

AnnotatedImage eco(const std::string& id, std::vector<std::string> species) {
  AnnotatedImage rec;
  rec.image_id = id;
  rec.path = id + ".ppm";
  rec.kind = ImageKind::Ecological;
  rec.width = 64;
  rec.height = 64;
  int offset = 0;
  for (auto& s : species) {
    rec.boxes.push_back({std::move(s), {offset, 0, offset + 8, 8}});
    offset += 10;
  }
  return rec;
}

AnnotatedImage pattern(const std::string& id, const std::string& species) {
  AnnotatedImage rec;
  rec.image_id = id;
  rec.path = id + ".ppm";
  rec.kind = ImageKind::Pattern;
  rec.width = 64;
  rec.height = 64;
  rec.boxes.push_back({species, {0, 0, 64, 64}});
  return rec;
}

// 1425 ecological images / 111 species with 17 singleton species, laid
// out so the 94 surviving species have exactly 34 odd image counts
// summing to 1408: 34 species x3 + 59 x22 + 1 x8.
DatasetManifest paper_eco_fixture() {
  DatasetManifest m;
  int img = 0;
  auto add_species = [&](int species_idx, int count) {
    char name[32];
    std::snprintf(name, sizeof(name), "species_%03d", species_idx);
    for (int k = 0; k < count; ++k)
      m.records.push_back(eco("img_" + std::to_string(img++), {name}));
  };
  int sp = 0;
  for (int i = 0; i < 34; ++i) add_species(sp++, 3);
  for (int i = 0; i < 59; ++i) add_species(sp++, 22);
  add_species(sp++, 8);
  for (int i = 0; i < 17; ++i) add_species(sp++, 1);  // singletons
  REQUIRE(m.records.size() == 1425);
  return m;
}

}  // namespace

TEST_CASE("manifest load: well-formed records") {
  TempDir tmp("dataset");
  const auto path = tmp.path / "m.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image_id":"a","path":"a.ppm","kind":"ecological","width":64,"height":48,"boxes":[{"species":"s1","x_min":0,"y_min":0,"x_max":10,"y_max":10}]})"
        << "\n";
    out << R"({"image_id":"b","path":"b.ppm","kind":"pattern","width":32,"height":32,"boxes":[{"species":"s2","x_min":0,"y_min":0,"x_max":32,"y_max":32}]})"
        << "\n";
    out << R"({"image_id":"c","path":"c.ppm","kind":"ecological","width":64,"height":64,"boxes":[{"species":"s1","x_min":5,"y_min":5,"x_max":20,"y_max":20},{"species":"s2","x_min":30,"y_min":30,"x_max":60,"y_max":60}]})"
        << "\n";
  }
  const auto m = data::load_manifest(path);
  REQUIRE(m.size() == 3);
  CHECK(m.records[0].kind == ImageKind::Ecological);
  CHECK(m.records[1].kind == ImageKind::Pattern);
  CHECK(m.records[2].boxes.size() == 2);
}

TEST_CASE("manifest load: pattern without boxes gets the full-image box") {
  TempDir tmp("dataset");
  const auto path = tmp.path / "m.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image_id":"p","path":"p.ppm","kind":"pattern","width":200,"height":100,"species":"s9"})"
        << "\n";
  }
  const auto m = data::load_manifest(path);
  REQUIRE(m.size() == 1);
  REQUIRE(m.records[0].boxes.size() == 1);
  CHECK(m.records[0].boxes[0].species == "s9");
  CHECK(m.records[0].boxes[0].box == BoundingBox{0, 0, 200, 100});
}

TEST_CASE("manifest load: invariant violations name the image_id") {
  TempDir tmp("dataset");
  const auto path = tmp.path / "m.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image_id":"bad_box","path":"x.ppm","kind":"ecological","width":64,"height":64,"boxes":[{"species":"s","x_min":10,"y_min":0,"x_max":10,"y_max":5}]})"
        << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_manifest(path),
                       doctest::Contains("bad_box"), Error);
}

TEST_CASE("manifest load: parse error carries the line number") {
  TempDir tmp("dataset");
  const auto path = tmp.path / "m.jsonl";
  {
    std::ofstream out(path);
    out << R"({"image_id":"a","path":"a.ppm","kind":"ecological","width":64,"height":64,"boxes":[{"species":"s","x_min":0,"y_min":0,"x_max":8,"y_max":8}]})"
        << "\n";
    out << "{ not json\n";
  }
  CHECK_THROWS_WITH_AS(data::load_manifest(path), doctest::Contains(":2:"),
                       Error);
}

TEST_CASE("manifest load: duplicate ids rejected") {
  DatasetManifest m;
  m.records.push_back(eco("dup", {"a"}));
  m.records.push_back(eco("dup", {"b"}));
  CHECK_THROWS_WITH_AS(data::validate_manifest(m), doctest::Contains("dup"),
                       Error);
}

TEST_CASE("manifest save/load round trip") {
  TempDir tmp("dataset");
  DatasetManifest m;
  m.records.push_back(eco("a", {"s1", "s2"}));
  m.records.push_back(pattern("b", "s3"));
  const auto path = tmp.path / "m.jsonl";
  data::save_manifest(m, path);
  const auto back = data::load_manifest(path);
  CHECK(back.records == m.records);
}

TEST_CASE("species_histogram counts per-image occurrences") {
  DatasetManifest m;
  m.records.push_back(eco("1", {"a"}));
  m.records.push_back(eco("2", {"a"}));
  m.records.push_back(eco("3", {"a"}));
  auto h = data::species_histogram(m);
  REQUIRE(h.entries.size() == 1);
  CHECK(h.entries[0] == std::pair<std::string, int>{"a", 3});

  DatasetManifest mixed;
  mixed.records.push_back(eco("1", {"a"}));
  mixed.records.push_back(eco("2", {"a", "b"}));
  mixed.records.push_back(eco("3", {"b"}));
  h = data::species_histogram(mixed);
  REQUIRE(h.entries.size() == 2);
  CHECK(h.entries[0].second == 2);
  CHECK(h.entries[1].second == 2);
}

TEST_CASE("species_histogram on the paper-shaped fixture") {
  const auto m = paper_eco_fixture();
  const auto h = data::species_histogram(m);
  CHECK(h.entries.size() == 111);

  // brute-force recount, independent of the implementation
  std::map<std::string, int> expect;
  for (const auto& rec : m.records) {
    std::set<std::string> seen;
    for (const auto& sb : rec.boxes) seen.insert(sb.species);
    for (const auto& s : seen) ++expect[s];
  }
  int singletons = 0;
  for (const auto& [species, count] : h.entries) {
    CHECK(expect.at(species) == count);
    if (count == 1) ++singletons;
  }
  CHECK(singletons == 17);
  for (std::size_t i = 1; i < h.entries.size(); ++i)
    CHECK(h.entries[i - 1].second >= h.entries[i].second);
}

TEST_CASE("remove_singletons reproduces the 1408/94 reduction") {
  const auto m = paper_eco_fixture();
  const auto cleaned = data::remove_singletons(m);
  CHECK(cleaned.size() == 1408);
  CHECK(data::species_set(cleaned).size() == 94);

  // idempotent
  const auto again = data::remove_singletons(cleaned);
  CHECK(again.records == cleaned.records);
}

TEST_CASE("remove_singletons edge cases") {
  DatasetManifest none;
  none.records.push_back(eco("1", {"a"}));
  none.records.push_back(eco("2", {"a"}));
  CHECK(data::remove_singletons(none).records == none.records);

  DatasetManifest all;
  all.records.push_back(eco("1", {"a"}));
  all.records.push_back(eco("2", {"b"}));
  CHECK(data::remove_singletons(all).empty());

  // mixed record keeps the non-singleton box only
  DatasetManifest mixed;
  mixed.records.push_back(eco("1", {"a", "lone"}));
  mixed.records.push_back(eco("2", {"a"}));
  const auto cleaned = data::remove_singletons(mixed);
  REQUIRE(cleaned.size() == 2);
  CHECK(cleaned.records[0].boxes.size() == 1);
  CHECK(cleaned.records[0].boxes[0].species == "a");
}

TEST_CASE("split_stratified reproduces 721/687") {
  const auto cleaned = data::remove_singletons(paper_eco_fixture());
  const auto [tr, te] = data::split_stratified(cleaned, 7);
  CHECK(tr.size() == 721);
  CHECK(te.size() == 687);
}

TEST_CASE("split_stratified ceil rule") {
  DatasetManifest five;
  for (int i = 0; i < 5; ++i) five.records.push_back(eco(std::to_string(i), {"a"}));
  auto [t5, e5] = data::split_stratified(five, 1);
  CHECK(t5.size() == 3);
  CHECK(e5.size() == 2);

  DatasetManifest four;
  for (int i = 0; i < 4; ++i) four.records.push_back(eco(std::to_string(i), {"a"}));
  auto [t4, e4] = data::split_stratified(four, 1);
  CHECK(t4.size() == 2);
  CHECK(e4.size() == 2);
}

TEST_CASE("split_stratified properties") {
  const auto cleaned = data::remove_singletons(paper_eco_fixture());
  const auto [tr1, te1] = data::split_stratified(cleaned, 5);
  const auto [tr2, te2] = data::split_stratified(cleaned, 5);
  CHECK(tr1.records == tr2.records);  // reproducible
  CHECK(te1.records == te2.records);

  // per species |train|-|test| in {0,1}; union == input and disjoint
  auto count_by_species = [](const DatasetManifest& m) {
    std::map<std::string, int> c;
    for (const auto& rec : m.records) ++c[rec.boxes.front().species];
    return c;
  };
  const auto ct = count_by_species(tr1);
  const auto ce = count_by_species(te1);
  for (const auto& [species, n_train] : ct) {
    const int n_test = ce.count(species) ? ce.at(species) : 0;
    const int diff = n_train - n_test;
    CHECK(diff >= 0);
    CHECK(diff <= 1);
  }
  std::set<std::string> ids;
  for (const auto& r : tr1.records) ids.insert(r.image_id);
  for (const auto& r : te1.records) CHECK(ids.insert(r.image_id).second);
  CHECK(ids.size() == cleaned.size());

  // a different seed permutes membership within species only
  const auto [tr3, te3] = data::split_stratified(cleaned, 6);
  CHECK(count_by_species(tr3) == ct);
  CHECK(tr3.size() == tr1.size());
}

TEST_CASE("build_training_set strategies and counts") {
  const auto cleaned = data::remove_singletons(paper_eco_fixture());
  const auto [eco_train, eco_test] = data::split_stratified(cleaned, 7);
  REQUIRE(eco_train.size() == 721);

  // 4270 patterns; 585 of them match eco species so matched = 1306
  DatasetManifest patterns;
  const auto eco_species =
      std::vector<std::string>(data::species_set(eco_train).begin(),
                               data::species_set(eco_train).end());
  for (int i = 0; i < 585; ++i)
    patterns.records.push_back(pattern("pat_m_" + std::to_string(i),
                                       eco_species[i % eco_species.size()]));
  for (int i = 0; i < 3685; ++i)
    patterns.records.push_back(
        pattern("pat_x_" + std::to_string(i), "unseen_" + std::to_string(i % 1082)));
  REQUIRE(patterns.size() == 4270);

  const auto data1 = data::build_training_set(eco_train, patterns,
                                              data::TrainsetStrategy::AllPatterns);
  CHECK(data1.size() == 4991);
  CHECK(data1.size() == eco_train.size() + patterns.size());

  const auto data2 = data::build_training_set(
      eco_train, patterns, data::TrainsetStrategy::MatchedPatterns);
  CHECK(data2.size() == 1306);
  // matched output species never leave the eco species set
  const auto eco_set = data::species_set(eco_train);
  for (const auto& s : data::species_set(data2)) CHECK(eco_set.contains(s));

  DatasetManifest empty;
  CHECK(data::build_training_set(eco_train, empty,
                                 data::TrainsetStrategy::AllPatterns)
            .records == eco_train.records);
}

TEST_CASE("build_training_set rejects non-pattern records") {
  DatasetManifest eco_train;
  eco_train.records.push_back(eco("e", {"a"}));
  DatasetManifest bad;
  bad.records.push_back(eco("not_a_pattern", {"a"}));
  CHECK_THROWS_AS(data::build_training_set(eco_train, bad,
                                           data::TrainsetStrategy::AllPatterns),
                  Error);
}
