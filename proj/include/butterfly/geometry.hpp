#pragma once

#include <span>
#include <string>
#include <vector>

#include "butterfly/box.hpp"

namespace butterfly::geom {

// Reference window centered on a feature-map cell, image-space pixels.
struct Anchor {
  double center_x = 0;
  double center_y = 0;
  double width = 0;
  double height = 0;

  Box to_box() const {
    return {center_x - width / 2, center_y - height / 2, center_x + width / 2,
            center_y + height / 2};
  }
};

// Parameterized offset between an anchor and a target box:
// tx=(x-xa)/wa, ty=(y-ya)/ha, tw=ln(w/wa), th=ln(h/ha).
struct BoxDelta {
  double tx = 0;
  double ty = 0;
  double tw = 0;
  double th = 0;
};

struct ScoredBox {
  Box box;
  double score = 0;       // probability in [0, 1]
  std::string class_id;   // empty = background / not yet classified
};

struct AnchorLabel {
  enum class Type { Positive, Negative, Ignore };
  Type type = Type::Ignore;
  int gt_index = -1;  // valid for Positive
};

// Intersection over union; 0 for disjoint, 1 for identical.
double iou(const Box& a, const Box& b);

// feat_w*feat_h*(scales*ratios) anchors, cell-major then scale-major
// then ratio-major. Anchor area is scale^2 and width/height == ratio.
std::vector<Anchor> generate_anchors(int feat_w, int feat_h, int stride,
                                     std::span<const double> scales,
                                     std::span<const double> ratios);

BoxDelta encode_delta(const Box& gt, const Anchor& anchor);

// Inverse of encode_delta, clipped to [0,image_w]x[0,image_h]. Scale
// offsets beyond |10| saturate instead of overflowing exp().
Box decode_delta(const BoxDelta& delta, const Anchor& anchor, double image_w,
                 double image_h);

// Positive: max IOU >= hi, or argmax anchor of some gt. Negative: max
// IOU <= lo. Everything else Ignore. Every gt ends up with at least one
// positive anchor.
std::vector<AnchorLabel> assign_anchor_labels(std::span<const Anchor> anchors,
                                              std::span<const Box> gts,
                                              double hi, double lo);

// Greedy NMS: keep the best remaining box, drop everything with
// IOU > threshold against it. Ties on score break by lexicographic box
// coordinates. top_n <= 0 means unlimited.
std::vector<ScoredBox> nms(std::vector<ScoredBox> candidates, double threshold,
                           int top_n);

}  // namespace butterfly::geom
