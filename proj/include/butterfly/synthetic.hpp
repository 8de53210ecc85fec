#pragma once

#include <cstdint>
#include <filesystem>

#include "butterfly/dataset.hpp"

namespace butterfly::synth {

// Colored-blob dataset for demos and end-to-end checks: each image is a
// textured background with one or two elliptical blobs whose color
// encodes the species and whose tight pixel bounding box is the ground
// truth.
struct BlobConfig {
  int num_species = 3;
  int train_images = 100;
  int test_images = 50;
  int image_size = 128;
  double two_object_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct BlobDataset {
  data::DatasetManifest train;
  data::DatasetManifest test;
  data::DatasetManifest all;  // train + test, for split-driven pipelines
};

// Writes PPM images under dir and returns manifests with paths relative
// to dir.
BlobDataset generate_blob_dataset(const BlobConfig& config,
                                  const std::filesystem::path& dir);

}  // namespace butterfly::synth
