#include "butterfly/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "butterfly/error.hpp"

namespace butterfly::geom {

double iou(const Box& a, const Box& b) {
  const double iw =
      std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih =
      std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Anchor> generate_anchors(int feat_w, int feat_h, int stride,
                                     std::span<const double> scales,
                                     std::span<const double> ratios) {
  std::vector<Anchor> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_w) * feat_h * scales.size() *
                  ratios.size());
  for (int y = 0; y < feat_h; ++y) {
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (double scale : scales) {
        for (double ratio : ratios) {
          // width/height == ratio with area scale^2 preserved exactly
          const double w = scale * std::sqrt(ratio);
          const double h = scale / std::sqrt(ratio);
          anchors.push_back({cx, cy, w, h});
        }
      }
    }
  }
  return anchors;
}

BoxDelta encode_delta(const Box& gt, const Anchor& anchor) {
  const double gx = (gt.x_min + gt.x_max) / 2;
  const double gy = (gt.y_min + gt.y_max) / 2;
  const double gw = gt.width();
  const double gh = gt.height();
  return {(gx - anchor.center_x) / anchor.width,
          (gy - anchor.center_y) / anchor.height,
          std::log(gw / anchor.width), std::log(gh / anchor.height)};
}

Box decode_delta(const BoxDelta& delta, const Anchor& anchor, double image_w,
                 double image_h) {
  constexpr double kMaxLogScale = 10.0;  // saturate instead of overflowing
  const double tw = std::clamp(delta.tw, -kMaxLogScale, kMaxLogScale);
  const double th = std::clamp(delta.th, -kMaxLogScale, kMaxLogScale);
  const double cx = anchor.center_x + delta.tx * anchor.width;
  const double cy = anchor.center_y + delta.ty * anchor.height;
  const double w = anchor.width * std::exp(tw);
  const double h = anchor.height * std::exp(th);
  Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  b.x_min = std::clamp(b.x_min, 0.0, image_w);
  b.x_max = std::clamp(b.x_max, 0.0, image_w);
  b.y_min = std::clamp(b.y_min, 0.0, image_h);
  b.y_max = std::clamp(b.y_max, 0.0, image_h);
  return b;
}

std::vector<AnchorLabel> assign_anchor_labels(std::span<const Anchor> anchors,
                                              std::span<const Box> gts,
                                              double hi, double lo) {
  if (hi <= lo) throw Error("assign_anchor_labels: hi must exceed lo");
  const std::size_t n = anchors.size();
  std::vector<AnchorLabel> labels(n);
  if (gts.empty()) {
    for (auto& l : labels) l = {AnchorLabel::Type::Negative, -1};
    return labels;
  }

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best(gts.size(), -1.0);
  std::vector<Box> anchor_boxes(n);
  for (std::size_t i = 0; i < n; ++i) anchor_boxes[i] = anchors[i].to_box();

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchor_boxes[i], gts[g]);
      if (best_gt[i] < 0 || v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= hi) {
      labels[i] = {AnchorLabel::Type::Positive, best_gt[i]};
    } else if (best_iou[i] <= lo) {
      labels[i] = {AnchorLabel::Type::Negative, -1};
    } else {
      labels[i] = {AnchorLabel::Type::Ignore, -1};
    }
  }

  // Argmax anchors: each gt promotes every anchor tied at its best IOU,
  // keeping the anchor's better match if it already has one.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    for (std::size_t i = 0; i < n; ++i) {
      if (iou(anchor_boxes[i], gts[g]) == gt_best[g]) {
        if (labels[i].type != AnchorLabel::Type::Positive ||
            best_iou[i] <= gt_best[g]) {
          labels[i] = {AnchorLabel::Type::Positive, static_cast<int>(g)};
        }
      }
    }
  }

  // A gt can still end up unmatched when its only argmax anchor was
  // promoted by a later gt; force its best anchor back.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    bool matched = false;
    for (const auto& l : labels)
      if (l.type == AnchorLabel::Type::Positive &&
          l.gt_index == static_cast<int>(g)) {
        matched = true;
        break;
      }
    if (!matched) {
      for (std::size_t i = 0; i < n; ++i) {
        if (iou(anchor_boxes[i], gts[g]) == gt_best[g]) {
          labels[i] = {AnchorLabel::Type::Positive, static_cast<int>(g)};
          break;
        }
      }
    }
  }
  return labels;
}

std::vector<ScoredBox> nms(std::vector<ScoredBox> candidates, double threshold,
                           int top_n) {
  std::sort(candidates.begin(), candidates.end(),
            [](const ScoredBox& a, const ScoredBox& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.box < b.box;
            });
  std::vector<ScoredBox> kept;
  std::vector<char> suppressed(candidates.size(), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(candidates[i]);
    if (top_n > 0 && kept.size() == static_cast<std::size_t>(top_n)) break;
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      if (!suppressed[j] &&
          iou(candidates[i].box, candidates[j].box) > threshold)
        suppressed[j] = 1;
    }
  }
  return kept;
}

}  // namespace butterfly::geom
