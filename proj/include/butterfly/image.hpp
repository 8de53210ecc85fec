#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace butterfly::img {

// 8-bit RGB raster, row-major, interleaved channels.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // size == width * height * 3

  static RasterImage filled(int w, int h, std::uint8_t r, std::uint8_t g,
                            std::uint8_t b);

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * 3 + c;
  }
  std::uint8_t at(int x, int y, int c) const { return pixels[index(x, y, c)]; }
  std::uint8_t& at(int x, int y, int c) { return pixels[index(x, y, c)]; }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

// Binary PPM (P6, maxval 255), bit-exact round trip.
RasterImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RasterImage& image, const std::filesystem::path& path);

RasterImage resize_nearest(const RasterImage& image, int out_w, int out_h);

}  // namespace butterfly::img
