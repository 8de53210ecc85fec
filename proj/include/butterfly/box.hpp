#pragma once

#include <compare>

namespace butterfly {

// Integer pixel box, half-open: x_max/y_max are one past the last
// covered pixel, so area() is exactly width*height.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const {
    return static_cast<long long>(width()) * height();
  }
  bool valid_within(int image_w, int image_h) const {
    return 0 <= x_min && x_min < x_max && x_max <= image_w && 0 <= y_min &&
           y_min < y_max && y_max <= image_h;
  }

  friend auto operator<=>(const BoundingBox&, const BoundingBox&) = default;
};

namespace geom {

// Continuous box used by anchors, proposals and evaluation. Same
// half-open convention as BoundingBox.
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  bool empty() const { return x_max <= x_min || y_max <= y_min; }

  static Box of(const BoundingBox& b) {
    return {static_cast<double>(b.x_min), static_cast<double>(b.y_min),
            static_cast<double>(b.x_max), static_cast<double>(b.y_max)};
  }

  friend auto operator<=>(const Box&, const Box&) = default;
};

}  // namespace geom
}  // namespace butterfly
