#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "butterfly/box.hpp"
#include "butterfly/dataset.hpp"
#include "butterfly/image.hpp"

namespace butterfly::aug {

// The nine amplification methods. Geometric kinds move pixels and boxes
// together; photometric kinds leave geometry untouched.
enum class AugKind {
  VFlip,
  HFlip,
  Rot90,   // 90 degrees clockwise
  Rot180,
  Rot270,
  GaussNoise,
  GaussBlur,
  ContrastUp,
  ContrastDown,
};

inline constexpr std::array<AugKind, 9> kAllKinds = {
    AugKind::VFlip,      AugKind::HFlip,      AugKind::Rot90,
    AugKind::Rot180,     AugKind::Rot270,     AugKind::GaussNoise,
    AugKind::GaussBlur,  AugKind::ContrastUp, AugKind::ContrastDown,
};

std::string_view tag(AugKind kind);
bool is_geometric(AugKind kind);

// Noise sigma and contrast factors on the 0..255 scale.
inline constexpr double kNoiseSigma = 10.0;
inline constexpr double kContrastUpFactor = 1.25;
inline constexpr double kContrastDownFactor = 0.8;

std::pair<img::RasterImage, std::vector<BoundingBox>> apply(
    const img::RasterImage& image, std::span<const BoundingBox> boxes,
    AugKind kind, std::uint64_t seed);

// Tenfold amplification: every record plus its nine variants. Variant
// files are written under output_dir as PPM; variant ids are
// "<original>__<kind>". Record content depends only on (seed, image_id),
// so the result is independent of scheduling. Returned paths are
// relative to output_dir and the manifest is sorted by image_id.
data::DatasetManifest amplify(const data::DatasetManifest& m,
                              const std::filesystem::path& image_root,
                              const std::filesystem::path& output_dir,
                              std::uint64_t seed, int threads = 1);

}  // namespace butterfly::aug
