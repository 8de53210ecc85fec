#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "butterfly/box.hpp"
#include "butterfly/trainer.hpp"

namespace butterfly::eval {

struct MatchCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

struct PrPoint {
  double recall = 0;
  double precision = 0;
};

// (recall, precision) after each rank of the score-sorted detections.
struct PrCurve {
  std::vector<PrPoint> points;
};

enum class ApMethod { Blocks, Voc2010 };

struct ApResult {
  std::string class_id;
  double ap = 0;
  ApMethod method = ApMethod::Voc2010;
  int blocks = 0;  // set for ApMethod::Blocks
};

struct MapReport {
  std::vector<ApResult> per_class;
  double map = 0;
};

// One class's detections across all images.
struct Detection {
  std::string image_id;
  double score = 0;
  geom::Box box;
};

struct MatchResult {
  std::vector<char> tp_flags;  // by descending score
  MatchCounts counts;
};

// Greedy matching in descending score order: a detection is TP when its
// IOU with some unconsumed same-image gt strictly exceeds the
// threshold (best such gt is consumed), otherwise FP. Unconsumed gts
// count as FN.
MatchResult match_detections(
    std::vector<Detection> preds,
    const std::map<std::string, std::vector<geom::Box>>& gts_by_image,
    double iou_threshold);

// 0/0 cases: precision 1, recall 0.
std::pair<double, double> precision_recall(const MatchCounts& c);

// Throws Error when total_gt == 0 (class absent from the test set).
PrCurve pr_curve(std::span<const char> ranked_tp_flags, long total_gt);

// Mean over n recall blocks of the interpolated precision maximum in
// each block.
ApResult ap_blocks(const PrCurve& curve, int n);

// Exact area under the monotone precision envelope.
ApResult ap_voc2010(const PrCurve& curve);

// Arithmetic mean; throws on empty input.
MapReport mean_ap(std::span<const ApResult> results);

struct OperatingPoint {
  std::string class_id;
  MatchCounts counts;
  double precision = 0;
  double recall = 0;
};

// Detections filtered to score > 0.5, matched at the given IOU
// threshold; one row per class with ground truth.
std::vector<OperatingPoint> operating_point_report(
    std::span<const train::Prediction> preds, const data::DatasetManifest& gt,
    double iou_threshold);

struct ClassEval {
  std::string species;
  ApResult ap;
  PrCurve curve;
  OperatingPoint op;
};

struct EvalReport {
  std::vector<ClassEval> classes;  // ascending species
  double map = 0;
  ApMethod method = ApMethod::Voc2010;
};

// Full protocol: per class with gt, rank detections, match at
// iou_threshold, compute AP with the chosen method; classes with gt but
// no predictions score 0; classes absent from gt are skipped.
EvalReport evaluate(std::span<const train::Prediction> preds,
                    const data::DatasetManifest& gt, double iou_threshold,
                    ApMethod method, int blocks = 10000);

}  // namespace butterfly::eval
