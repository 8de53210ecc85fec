#include "butterfly/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "butterfly/error.hpp"
#include "butterfly/image.hpp"
#include "butterfly/rng.hpp"

namespace butterfly::synth {

namespace fs = std::filesystem;

namespace {

struct Palette {
  std::uint8_t r, g, b;
};

// Saturated, well-separated blob colors; species beyond the table cycle
// with a brightness shift.
constexpr Palette kColors[] = {
    {210, 60, 50}, {60, 200, 70}, {65, 90, 215},
    {220, 200, 50}, {200, 60, 200}, {60, 200, 200},
};

std::string species_name(int i) {
  static const char* names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  if (i < 6) return std::string("species_") + names[i];
  return "species_" + std::to_string(i);
}

struct Blob {
  int cx, cy, rx, ry;
  int species;
  BoundingBox box;  // filled during rasterization
};

bool inside(const Blob& b, int x, int y) {
  const double dx = (x - b.cx) / static_cast<double>(b.rx);
  const double dy = (y - b.cy) / static_cast<double>(b.ry);
  return dx * dx + dy * dy <= 1.0;
}

data::AnnotatedImage render(const std::string& image_id, int size,
                            std::vector<Blob> blobs, std::uint64_t seed,
                            const fs::path& dir) {
  img::RasterImage im;
  im.width = size;
  im.height = size;
  im.pixels.resize(static_cast<std::size_t>(size) * size * 3);

  rng::SplitMix64 g(seed);
  // textured gray background: per-pixel noise over a soft gradient
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double grad = 16.0 * std::sin(0.05 * x) * std::cos(0.07 * y);
      for (int c = 0; c < 3; ++c) {
        const double v = 118 + grad + g.next_in(-24.0, 24.0);
        im.at(x, y, c) =
            static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
      }
    }
  }

  for (auto& b : blobs) {
    const Palette col = kColors[b.species % 6];
    int x0 = size, y0 = size, x1 = -1, y1 = -1;
    for (int y = std::max(0, b.cy - b.ry); y <= std::min(size - 1, b.cy + b.ry);
         ++y) {
      for (int x = std::max(0, b.cx - b.rx);
           x <= std::min(size - 1, b.cx + b.rx); ++x) {
        if (!inside(b, x, y)) continue;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
        im.at(x, y, 0) = static_cast<std::uint8_t>(
            std::clamp<long>(col.r + g.next_below(21) - 10, 0, 255));
        im.at(x, y, 1) = static_cast<std::uint8_t>(
            std::clamp<long>(col.g + g.next_below(21) - 10, 0, 255));
        im.at(x, y, 2) = static_cast<std::uint8_t>(
            std::clamp<long>(col.b + g.next_below(21) - 10, 0, 255));
      }
    }
    if (x1 < x0) throw Error("synthetic blob fell outside the image");
    b.box = {x0, y0, x1 + 1, y1 + 1};
  }

  img::write_ppm(im, dir / (image_id + ".ppm"));

  data::AnnotatedImage rec;
  rec.image_id = image_id;
  rec.path = image_id + ".ppm";
  rec.kind = data::ImageKind::Ecological;
  rec.width = size;
  rec.height = size;
  for (const auto& b : blobs)
    rec.boxes.push_back({species_name(b.species), b.box});
  return rec;
}

Blob random_blob(rng::SplitMix64& g, int size, int species) {
  Blob b;
  b.species = species;
  // radii chosen so box sides land near the 32/64 anchor scales
  b.rx = static_cast<int>(15 + g.next_below(16));  // 15..30
  b.ry = static_cast<int>(15 + g.next_below(16));
  b.cx = static_cast<int>(b.rx + 2 + g.next_below(
                              static_cast<std::uint64_t>(size - 2 * b.rx - 4)));
  b.cy = static_cast<int>(b.ry + 2 + g.next_below(
                              static_cast<std::uint64_t>(size - 2 * b.ry - 4)));
  return b;
}

bool overlaps(const Blob& a, const Blob& b) {
  const int gap = 6;
  return !(a.cx + a.rx + gap < b.cx - b.rx || b.cx + b.rx + gap < a.cx - a.rx ||
           a.cy + a.ry + gap < b.cy - b.ry || b.cy + b.ry + gap < a.cy - a.ry);
}

data::AnnotatedImage make_image(const BlobConfig& cfg, const std::string& id,
                                int index, bool two_objects,
                                const fs::path& dir) {
  rng::SplitMix64 g(rng::derive_seed(cfg.seed, id));
  std::vector<Blob> blobs;
  blobs.push_back(random_blob(g, cfg.image_size, index % cfg.num_species));
  if (two_objects) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Blob b = random_blob(g, cfg.image_size, (index + 1) % cfg.num_species);
      if (!overlaps(blobs[0], b)) {
        blobs.push_back(b);
        break;
      }
    }
  }
  return render(id, cfg.image_size, std::move(blobs),
                rng::derive_seed(cfg.seed, id + "/pixels"), dir);
}

}  // namespace

BlobDataset generate_blob_dataset(const BlobConfig& config,
                                  const fs::path& dir) {
  if (config.num_species < 1 || config.image_size < 64)
    throw Error("generate_blob_dataset: bad config");
  fs::create_directories(dir);

  BlobDataset ds;
  ds.train.label = "synthetic-train";
  ds.test.label = "synthetic-test";
  ds.all.label = "synthetic";
  ds.train.seed = ds.test.seed = ds.all.seed = config.seed;

  const int two_every =
      config.two_object_fraction > 0
          ? std::max(1, static_cast<int>(1.0 / config.two_object_fraction))
          : 0;
  char id[64];
  for (int i = 0; i < config.train_images + config.test_images; ++i) {
    const bool is_test = i >= config.train_images;
    std::snprintf(id, sizeof(id), "%s_%04d", is_test ? "test" : "train", i);
    const bool two = two_every > 0 && i % two_every == two_every - 1;
    auto rec = make_image(config, id, i, two, dir);
    (is_test ? ds.test : ds.train).records.push_back(rec);
    ds.all.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace butterfly::synth
