#include "butterfly/augment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <unordered_set>

#include "butterfly/error.hpp"
#include "butterfly/rng.hpp"

namespace butterfly::aug {

namespace fs = std::filesystem;
using img::RasterImage;

std::string_view tag(AugKind kind) {
  switch (kind) {
    case AugKind::VFlip: return "vflip";
    case AugKind::HFlip: return "hflip";
    case AugKind::Rot90: return "rot90";
    case AugKind::Rot180: return "rot180";
    case AugKind::Rot270: return "rot270";
    case AugKind::GaussNoise: return "gaussnoise";
    case AugKind::GaussBlur: return "gaussblur";
    case AugKind::ContrastUp: return "contrastup";
    case AugKind::ContrastDown: return "contrastdown";
  }
  return "?";
}

bool is_geometric(AugKind kind) {
  switch (kind) {
    case AugKind::VFlip:
    case AugKind::HFlip:
    case AugKind::Rot90:
    case AugKind::Rot180:
    case AugKind::Rot270:
      return true;
    default:
      return false;
  }
}

namespace {

std::uint8_t clamp_byte(double x) {
  long v = std::lround(x);
  return static_cast<std::uint8_t>(std::clamp(v, 0L, 255L));
}

RasterImage vflip(const RasterImage& in) {
  RasterImage out = in;
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, in.height - 1 - y, c) = in.at(x, y, c);
  return out;
}

RasterImage hflip(const RasterImage& in) {
  RasterImage out = in;
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(in.width - 1 - x, y, c) = in.at(x, y, c);
  return out;
}

// 90 degrees clockwise: (x, y) -> (H-1-y, x) in an H x W result.
RasterImage rot90(const RasterImage& in) {
  RasterImage out;
  out.width = in.height;
  out.height = in.width;
  out.pixels.resize(in.pixels.size());
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(in.height - 1 - y, x, c) = in.at(x, y, c);
  return out;
}

RasterImage gauss_noise(const RasterImage& in, std::uint64_t seed) {
  RasterImage out = in;
  rng::Gaussian gauss(seed);
  for (auto& p : out.pixels) p = clamp_byte(p + kNoiseSigma * gauss.next());
  return out;
}

// 3x3 binomial kernel (1,2,1)x(1,2,1)/16, edges replicated. Integer
// arithmetic with round-to-nearest keeps constant fields exact.
RasterImage gauss_blur(const RasterImage& in) {
  RasterImage out = in;
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        int acc = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int sy = std::clamp(y + dy, 0, in.height - 1);
          const int wy = 2 - std::abs(dy);
          for (int dx = -1; dx <= 1; ++dx) {
            const int sx = std::clamp(x + dx, 0, in.width - 1);
            acc += wy * (2 - std::abs(dx)) * in.at(sx, sy, c);
          }
        }
        out.at(x, y, c) = static_cast<std::uint8_t>((acc + 8) >> 4);
      }
    }
  }
  return out;
}

RasterImage contrast(const RasterImage& in, double factor) {
  RasterImage out = in;
  for (auto& p : out.pixels) p = clamp_byte(128.0 + factor * (p - 128.0));
  return out;
}

BoundingBox vflip_box(const BoundingBox& b, int h) {
  return {b.x_min, h - b.y_max, b.x_max, h - b.y_min};
}
BoundingBox hflip_box(const BoundingBox& b, int w) {
  return {w - b.x_max, b.y_min, w - b.x_min, b.y_max};
}
BoundingBox rot90_box(const BoundingBox& b, int h) {
  return {h - b.y_max, b.x_min, h - b.y_min, b.x_max};
}

}  // namespace

std::pair<RasterImage, std::vector<BoundingBox>> apply(
    const RasterImage& image, std::span<const BoundingBox> boxes, AugKind kind,
    std::uint64_t seed) {
  std::vector<BoundingBox> out_boxes(boxes.begin(), boxes.end());
  RasterImage out;
  switch (kind) {
    case AugKind::VFlip:
      out = vflip(image);
      for (auto& b : out_boxes) b = vflip_box(b, image.height);
      break;
    case AugKind::HFlip:
      out = hflip(image);
      for (auto& b : out_boxes) b = hflip_box(b, image.width);
      break;
    case AugKind::Rot90:
      out = rot90(image);
      for (auto& b : out_boxes) b = rot90_box(b, image.height);
      break;
    case AugKind::Rot180:
      out = rot90(rot90(image));
      for (auto& b : out_boxes)
        b = rot90_box(rot90_box(b, image.height), image.width);
      break;
    case AugKind::Rot270:
      out = rot90(rot90(rot90(image)));
      for (auto& b : out_boxes)
        b = rot90_box(rot90_box(rot90_box(b, image.height), image.width),
                      image.height);
      break;
    case AugKind::GaussNoise:
      out = gauss_noise(image, seed);
      break;
    case AugKind::GaussBlur:
      out = gauss_blur(image);
      break;
    case AugKind::ContrastUp:
      out = contrast(image, kContrastUpFactor);
      break;
    case AugKind::ContrastDown:
      out = contrast(image, kContrastDownFactor);
      break;
  }
  return {std::move(out), std::move(out_boxes)};
}

namespace {

std::string sanitize_filename(std::string_view id) {
  std::string s(id);
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' &&
        c != '-')
      c = '_';
  }
  return s;
}

std::string relative_to(const fs::path& target, const fs::path& base) {
  const fs::path t = fs::absolute(target).lexically_normal();
  const fs::path b = fs::absolute(base).lexically_normal();
  return t.lexically_relative(b).generic_string();
}

// Original record plus nine variants, all paths relative to output_dir.
std::vector<data::AnnotatedImage> amplify_record(
    const data::AnnotatedImage& rec, const fs::path& image_root,
    const fs::path& output_dir, std::uint64_t seed) {
  RasterImage image;
  try {
    image = img::read_ppm(image_root / rec.path);
  } catch (const Error& e) {
    throw Error("amplify: record '" + rec.image_id + "': " + e.what());
  }
  if (image.width != rec.width || image.height != rec.height)
    throw Error("amplify: record '" + rec.image_id +
                "': manifest dimensions do not match the file");

  std::vector<data::AnnotatedImage> out;
  out.reserve(10);
  data::AnnotatedImage original = rec;
  original.path = relative_to(image_root / rec.path, output_dir);
  out.push_back(std::move(original));

  std::vector<BoundingBox> boxes;
  for (const auto& sb : rec.boxes) boxes.push_back(sb.box);
  const std::uint64_t record_seed = rng::derive_seed(seed, rec.image_id);

  for (AugKind kind : kAllKinds) {
    auto [variant, vboxes] = apply(image, boxes, kind, record_seed);
    data::AnnotatedImage v;
    v.image_id = rec.image_id + "__" + std::string(tag(kind));
    const std::string file = sanitize_filename(v.image_id) + ".ppm";
    v.path = file;
    v.kind = rec.kind;
    v.width = variant.width;
    v.height = variant.height;
    for (std::size_t i = 0; i < rec.boxes.size(); ++i)
      v.boxes.push_back({rec.boxes[i].species, vboxes[i]});
    img::write_ppm(variant, output_dir / file);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

data::DatasetManifest amplify(const data::DatasetManifest& m,
                              const fs::path& image_root,
                              const fs::path& output_dir, std::uint64_t seed,
                              int threads) {
  fs::create_directories(output_dir);

  // Output filenames must be unique after sanitization.
  std::unordered_set<std::string> names;
  for (const auto& rec : m.records) {
    if (!names.insert(sanitize_filename(rec.image_id)).second)
      throw Error("amplify: image ids '" + rec.image_id +
                  "' collide after filename sanitization");
  }

  std::vector<std::vector<data::AnnotatedImage>> per_record(m.records.size());
  const int n_threads = std::max(1, threads);
  if (n_threads == 1 || m.records.size() < 2) {
    for (std::size_t i = 0; i < m.records.size(); ++i)
      per_record[i] = amplify_record(m.records[i], image_root, output_dir, seed);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::string> errors(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = next.fetch_add(1); i < m.records.size();
             i = next.fetch_add(1)) {
          try {
            per_record[i] =
                amplify_record(m.records[i], image_root, output_dir, seed);
          } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(t)] = e.what();
            return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (!e.empty()) throw Error(e);
  }

  data::DatasetManifest out;
  out.label = m.label + "(x10)";
  out.seed = seed;
  for (auto& group : per_record)
    for (auto& rec : group) out.records.push_back(std::move(rec));
  std::sort(out.records.begin(), out.records.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  data::validate_manifest(out);
  return out;
}

}  // namespace butterfly::aug
