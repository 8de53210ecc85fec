#include "butterfly/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "butterfly/error.hpp"
#include "butterfly/geometry.hpp"

namespace butterfly::eval {

MatchResult match_detections(
    std::vector<Detection> preds,
    const std::map<std::string, std::vector<geom::Box>>& gts_by_image,
    double iou_threshold) {
  std::sort(preds.begin(), preds.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.box < b.box;
  });

  long total_gt = 0;
  std::map<std::string, std::vector<char>> consumed;
  for (const auto& [id, boxes] : gts_by_image) {
    consumed[id].assign(boxes.size(), 0);
    total_gt += static_cast<long>(boxes.size());
  }

  MatchResult result;
  result.tp_flags.reserve(preds.size());
  for (const auto& det : preds) {
    bool tp = false;
    const auto it = gts_by_image.find(det.image_id);
    if (it != gts_by_image.end()) {
      auto& used = consumed[det.image_id];
      // best unconsumed gt strictly above the threshold
      double best = iou_threshold;
      int best_g = -1;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (used[g]) continue;
        const double v = geom::iou(det.box, it->second[g]);
        if (v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0) {
        used[static_cast<std::size_t>(best_g)] = 1;
        tp = true;
      }
    }
    result.tp_flags.push_back(tp ? 1 : 0);
    if (tp)
      ++result.counts.tp;
    else
      ++result.counts.fp;
  }
  result.counts.fn = total_gt - result.counts.tp;
  return result;
}

std::pair<double, double> precision_recall(const MatchCounts& c) {
  const double precision =
      (c.tp + c.fp) == 0 ? 1.0 : static_cast<double>(c.tp) / (c.tp + c.fp);
  const double recall =
      (c.tp + c.fn) == 0 ? 0.0 : static_cast<double>(c.tp) / (c.tp + c.fn);
  return {precision, recall};
}

PrCurve pr_curve(std::span<const char> ranked_tp_flags, long total_gt) {
  if (total_gt <= 0) throw Error("pr_curve: class has no ground truth");
  PrCurve curve;
  curve.points.reserve(ranked_tp_flags.size());
  long tp = 0;
  long seen = 0;
  for (char flag : ranked_tp_flags) {
    ++seen;
    if (flag) ++tp;
    curve.points.push_back({static_cast<double>(tp) / total_gt,
                            static_cast<double>(tp) / seen});
  }
  return curve;
}

ApResult ap_blocks(const PrCurve& curve, int n) {
  if (n < 1) throw Error("ap_blocks: n must be >= 1");
  // Suffix maxima over points sorted by recall make each block's
  // interpolated maximum an O(log) lookup.
  std::vector<PrPoint> pts(curve.points.begin(), curve.points.end());
  std::sort(pts.begin(), pts.end(),
            [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  std::vector<double> suffix(pts.size());
  double run = 0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    run = std::max(run, pts[i].precision);
    suffix[i] = run;
  }
  double sum = 0;
  for (int i = 1; i <= n; ++i) {
    const double lo = static_cast<double>(i - 1) / n;
    const auto it = std::lower_bound(
        pts.begin(), pts.end(), lo,
        [](const PrPoint& p, double r) { return p.recall < r; });
    if (it != pts.end()) sum += suffix[static_cast<std::size_t>(it - pts.begin())];
  }
  ApResult res;
  res.ap = sum / n;
  res.method = ApMethod::Blocks;
  res.blocks = n;
  return res;
}

ApResult ap_voc2010(const PrCurve& curve) {
  // Exact area under the monotone envelope: points arrive in rank
  // order, so recall is non-decreasing and the suffix maximum of
  // precision is the envelope at each recall step.
  const auto& pts = curve.points;
  std::vector<double> suffix(pts.size());
  double run = 0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    run = std::max(run, pts[i].precision);
    suffix[i] = run;
  }
  double ap = 0;
  double prev_recall = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].recall > prev_recall) {
      ap += (pts[i].recall - prev_recall) * suffix[i];
      prev_recall = pts[i].recall;
    }
  }
  ApResult res;
  res.ap = ap;
  res.method = ApMethod::Voc2010;
  return res;
}

MapReport mean_ap(std::span<const ApResult> results) {
  if (results.empty()) throw Error("mean_ap: no per-class results");
  MapReport report;
  report.per_class.assign(results.begin(), results.end());
  double sum = 0;
  for (const auto& r : results) sum += r.ap;
  report.map = sum / static_cast<double>(results.size());
  return report;
}

namespace {

struct ClassData {
  std::vector<Detection> dets;
  std::map<std::string, std::vector<geom::Box>> gts;
  long total_gt = 0;
};

std::map<std::string, ClassData> group_by_class(
    std::span<const train::Prediction> preds, const data::DatasetManifest& gt) {
  std::map<std::string, ClassData> classes;
  for (const auto& rec : gt.records) {
    for (const auto& sb : rec.boxes) {
      auto& cd = classes[sb.species];
      cd.gts[rec.image_id].push_back(geom::Box::of(sb.box));
      ++cd.total_gt;
    }
  }
  for (const auto& p : preds) {
    const auto it = classes.find(p.species);
    if (it == classes.end()) continue;  // class absent from the test set
    it->second.dets.push_back({p.image_id, p.score, p.box});
  }
  return classes;
}

}  // namespace

std::vector<OperatingPoint> operating_point_report(
    std::span<const train::Prediction> preds, const data::DatasetManifest& gt,
    double iou_threshold) {
  auto classes = group_by_class(preds, gt);
  std::vector<OperatingPoint> out;
  for (auto& [species, cd] : classes) {
    // the fixed operating point: classification probability strictly
    // above 0.5
    std::vector<Detection> strong;
    for (const auto& d : cd.dets)
      if (d.score > 0.5) strong.push_back(d);
    auto match = match_detections(std::move(strong), cd.gts, iou_threshold);
    OperatingPoint op;
    op.class_id = species;
    op.counts = match.counts;
    std::tie(op.precision, op.recall) = precision_recall(match.counts);
    out.push_back(std::move(op));
  }
  return out;
}

EvalReport evaluate(std::span<const train::Prediction> preds,
                    const data::DatasetManifest& gt, double iou_threshold,
                    ApMethod method, int blocks) {
  auto classes = group_by_class(preds, gt);
  if (classes.empty()) throw Error("evaluate: ground truth has no boxes");

  EvalReport report;
  report.method = method;
  std::vector<ApResult> aps;
  for (auto& [species, cd] : classes) {
    ClassEval ce;
    ce.species = species;

    auto match = match_detections(cd.dets, cd.gts, iou_threshold);
    ce.curve = pr_curve(match.tp_flags, cd.total_gt);
    ce.ap = method == ApMethod::Voc2010 ? ap_voc2010(ce.curve)
                                        : ap_blocks(ce.curve, blocks);
    ce.ap.class_id = species;

    std::vector<Detection> strong;
    for (const auto& d : cd.dets)
      if (d.score > 0.5) strong.push_back(d);
    auto op_match = match_detections(std::move(strong), cd.gts, iou_threshold);
    ce.op.class_id = species;
    ce.op.counts = op_match.counts;
    std::tie(ce.op.precision, ce.op.recall) = precision_recall(op_match.counts);

    aps.push_back(ce.ap);
    report.classes.push_back(std::move(ce));
  }
  report.map = mean_ap(aps).map;
  return report;
}

}  // namespace butterfly::eval
