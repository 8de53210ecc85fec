// Generates the colored-blob demo dataset so the pipeline can be run
// end to end without any real butterfly photos.

#include <iostream>

#include <CLI11.hpp>

#include "butterfly/dataset.hpp"
#include "butterfly/synthetic.hpp"

namespace fs = std::filesystem;
using namespace butterfly;

int main(int argc, char** argv) {
  CLI::App app{"synthetic blob dataset generator"};
  synth::BlobConfig cfg;
  std::string out_dir;
  app.add_option("--out", out_dir, "output directory")->required();
  app.add_option("--species", cfg.num_species);
  app.add_option("--train-images", cfg.train_images);
  app.add_option("--test-images", cfg.test_images);
  app.add_option("--image-size", cfg.image_size);
  app.add_option("--two-object-fraction", cfg.two_object_fraction);
  app.add_option("--seed", cfg.seed);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto ds = synth::generate_blob_dataset(cfg, out_dir);
    data::save_manifest(ds.train, fs::path(out_dir) / "train.jsonl");
    data::save_manifest(ds.test, fs::path(out_dir) / "test.jsonl");
    data::save_manifest(ds.all, fs::path(out_dir) / "all.jsonl");
    for (const char* f : {"train.jsonl", "test.jsonl", "all.jsonl"})
      std::cout << "wrote " << (fs::path(out_dir) / f).string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
