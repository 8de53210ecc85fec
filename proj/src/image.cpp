#include "butterfly/image.hpp"

#include <cctype>
#include <fstream>

#include "butterfly/error.hpp"

namespace butterfly::img {

namespace fs = std::filesystem;

RasterImage RasterImage::filled(int w, int h, std::uint8_t r, std::uint8_t g,
                                std::uint8_t b) {
  RasterImage im;
  im.width = w;
  im.height = h;
  im.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < im.pixels.size(); i += 3) {
    im.pixels[i] = r;
    im.pixels[i + 1] = g;
    im.pixels[i + 2] = b;
  }
  return im;
}

namespace {

// Next token after whitespace and '#' comments.
int read_header_int(std::istream& in, const fs::path& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  if (ch == EOF || !std::isdigit(ch))
    throw Error("malformed PPM header: " + path.string());
  long value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    if (value > 1000000) throw Error("PPM header value out of range: " + path.string());
    ch = in.get();
  }
  if (ch != EOF) in.unget();
  return static_cast<int>(value);
}

}  // namespace

RasterImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image: " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6')
    throw Error("not a binary PPM (P6): " + path.string());
  RasterImage im;
  im.width = read_header_int(in, path);
  im.height = read_header_int(in, path);
  const int maxval = read_header_int(in, path);
  if (maxval != 255)
    throw Error("unsupported PPM maxval " + std::to_string(maxval) + ": " +
                path.string());
  in.get();  // single whitespace byte after maxval
  if (im.width <= 0 || im.height <= 0)
    throw Error("bad PPM dimensions: " + path.string());
  im.pixels.resize(static_cast<std::size_t>(im.width) * im.height * 3);
  in.read(reinterpret_cast<char*>(im.pixels.data()),
          static_cast<std::streamsize>(im.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(im.pixels.size()))
    throw Error("truncated PPM payload: " + path.string());
  return im;
}

void write_ppm(const RasterImage& image, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image: " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error("write failed: " + path.string());
}

RasterImage resize_nearest(const RasterImage& image, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw Error("resize to non-positive size");
  RasterImage out;
  out.width = out_w;
  out.height = out_h;
  out.pixels.resize(static_cast<std::size_t>(out_w) * out_h * 3);
  for (int y = 0; y < out_h; ++y) {
    int sy = static_cast<int>((static_cast<long long>(y) * image.height) / out_h);
    for (int x = 0; x < out_w; ++x) {
      int sx = static_cast<int>((static_cast<long long>(x) * image.width) / out_w);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

}  // namespace butterfly::img
