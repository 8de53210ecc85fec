#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "butterfly/geometry.hpp"
#include "butterfly/rng.hpp"

using namespace butterfly;
using geom::Anchor;
using geom::Box;
using geom::BoxDelta;
using geom::ScoredBox;

namespace {

Box random_box(rng::SplitMix64& g, double w, double h) {
  const double x0 = g.next_in(0, w - 2);
  const double y0 = g.next_in(0, h - 2);
  const double x1 = g.next_in(x0 + 1, w);
  const double y1 = g.next_in(y0 + 1, h);
  return {x0, y0, x1, y1};
}

// Reference greedy NMS, written independently of geom::nms: sorts a
// copy, then linearly scans kept boxes per candidate.
std::vector<ScoredBox> nms_oracle(std::vector<ScoredBox> boxes, double thr,
                                  int top_n) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const ScoredBox& a, const ScoredBox& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.box < b.box;
                   });
  std::vector<ScoredBox> kept;
  for (const auto& c : boxes) {
    bool keep = true;
    for (const auto& k : kept)
      if (geom::iou(k.box, c.box) > thr) keep = false;
    if (keep) kept.push_back(c);
    if (top_n > 0 && kept.size() == static_cast<std::size_t>(top_n)) break;
  }
  return kept;
}

}  // namespace

TEST_CASE("iou examples") {
  const Box a{0, 0, 10, 10};
  CHECK(geom::iou(a, a) == doctest::Approx(1.0));
  CHECK(geom::iou(a, Box{20, 20, 30, 30}) == 0.0);
  // intersection 5x5 = 25, union 100+100-25 = 175
  CHECK(geom::iou(a, Box{5, 5, 15, 15}) == doctest::Approx(25.0 / 175.0));
}

TEST_CASE("iou properties over random boxes") {
  rng::SplitMix64 g(42);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(g, 100, 80);
    const Box b = random_box(g, 100, 80);
    const double ab = geom::iou(a, b);
    CHECK(ab == geom::iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(geom::iou(a, a) == doctest::Approx(1.0));
  }
}

TEST_CASE("generate_anchors counts and shapes") {
  const double scales[] = {32, 64, 128};
  const double ratios[] = {0.5, 1, 2};

  auto one = geom::generate_anchors(1, 1, 8, scales, ratios);
  REQUIRE(one.size() == 9);
  for (const auto& a : one) {
    CHECK(a.center_x == doctest::Approx(4.0));
    CHECK(a.center_y == doctest::Approx(4.0));
    CHECK(a.width > 0);
    CHECK(a.height > 0);
  }

  auto grid = geom::generate_anchors(16, 16, 8, scales, ratios);
  CHECK(grid.size() == 16 * 16 * 9);

  // area == scale^2, width/height == ratio
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t r = 0; r < 3; ++r) {
      const auto& a = one[s * 3 + r];
      CHECK(a.width * a.height == doctest::Approx(scales[s] * scales[s]));
      CHECK(a.width / a.height == doctest::Approx(ratios[r]));
    }
  }

  const double just64[] = {64};
  const double square[] = {1};
  auto sq = geom::generate_anchors(1, 1, 16, just64, square);
  REQUIRE(sq.size() == 1);
  CHECK(sq[0].width == doctest::Approx(64));
  CHECK(sq[0].height == doctest::Approx(64));
}

TEST_CASE("encode/decode identity cases") {
  const Anchor a{50, 40, 32, 16};
  const auto zero = geom::encode_delta(a.to_box(), a);
  CHECK(zero.tx == doctest::Approx(0));
  CHECK(zero.ty == doctest::Approx(0));
  CHECK(zero.tw == doctest::Approx(0));
  CHECK(zero.th == doctest::Approx(0));

  const Box back = geom::decode_delta({0, 0, 0, 0}, a, 128, 128);
  const Box expect = a.to_box();
  CHECK(back.x_min == doctest::Approx(expect.x_min));
  CHECK(back.y_min == doctest::Approx(expect.y_min));
  CHECK(back.x_max == doctest::Approx(expect.x_max));
  CHECK(back.y_max == doctest::Approx(expect.y_max));
}

TEST_CASE("encode/decode round trip under 1e-6") {
  rng::SplitMix64 g(7);
  for (int i = 0; i < 1000; ++i) {
    const Box gt = random_box(g, 128, 128);
    const Anchor a{g.next_in(10, 118), g.next_in(10, 118), g.next_in(4, 64),
                   g.next_in(4, 64)};
    const Box round = geom::decode_delta(geom::encode_delta(gt, a), a, 128, 128);
    CHECK(std::abs(round.x_min - gt.x_min) < 1e-6);
    CHECK(std::abs(round.y_min - gt.y_min) < 1e-6);
    CHECK(std::abs(round.x_max - gt.x_max) < 1e-6);
    CHECK(std::abs(round.y_max - gt.y_max) < 1e-6);
  }
}

TEST_CASE("decode saturates huge log-scale offsets") {
  const Anchor a{64, 64, 16, 16};
  const Box b = geom::decode_delta({0, 0, 500, -500}, a, 128, 128);
  CHECK(std::isfinite(b.x_min));
  CHECK(std::isfinite(b.x_max));
  CHECK(b.x_max <= 128);
  CHECK(b.x_min >= 0);
}

TEST_CASE("assign_anchor_labels basics") {
  const Box gt{10, 10, 42, 42};
  std::vector<Anchor> anchors = {
      {26, 26, 32, 32},    // identical to gt
      {100, 100, 16, 16},  // disjoint
  };
  auto labels = geom::assign_anchor_labels(anchors, std::vector<Box>{gt}, 0.7, 0.3);
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].type == geom::AnchorLabel::Type::Positive);
  CHECK(labels[0].gt_index == 0);
  CHECK(labels[1].type == geom::AnchorLabel::Type::Negative);
}

TEST_CASE("argmax anchor becomes positive even below hi") {
  // five anchors, none reaching IOU 0.7 against gt
  const Box gt{0, 0, 20, 20};
  std::vector<Anchor> anchors;
  for (int i = 0; i < 5; ++i)
    anchors.push_back({30.0 + 6 * i, 10, 20, 20});
  // brute-force IOU matrix picks the best anchor
  std::size_t best = 0;
  double best_v = -1;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double v = geom::iou(anchors[i].to_box(), gt);
    CHECK(v < 0.7);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  auto labels = geom::assign_anchor_labels(anchors, std::vector<Box>{gt}, 0.7, 0.3);
  CHECK(labels[best].type == geom::AnchorLabel::Type::Positive);
  CHECK(labels[best].gt_index == 0);
}

TEST_CASE("assignment properties on random fixtures") {
  rng::SplitMix64 g(99);
  const double scales[] = {16, 32, 64};
  const double ratios[] = {0.5, 1, 2};
  const auto anchors = geom::generate_anchors(8, 8, 16, scales, ratios);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Box> gts;
    const int n_gt = 1 + static_cast<int>(g.next_below(4));
    for (int i = 0; i < n_gt; ++i) gts.push_back(random_box(g, 128, 128));
    const auto labels = geom::assign_anchor_labels(anchors, gts, 0.7, 0.3);

    std::vector<char> matched(gts.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].type == geom::AnchorLabel::Type::Positive) {
        REQUIRE(labels[i].gt_index >= 0);
        REQUIRE(labels[i].gt_index < n_gt);
        matched[static_cast<std::size_t>(labels[i].gt_index)] = 1;
      }
    }
    for (char m : matched) CHECK(m == 1);  // every gt matched
  }
}

TEST_CASE("nms trivial cases") {
  std::vector<ScoredBox> two = {{{0, 0, 10, 10}, 0.9, ""},
                                {{0, 0, 10, 10}, 0.8, ""}};
  auto kept = geom::nms(two, 0.5, 100);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  std::vector<ScoredBox> disjoint = {{{0, 0, 10, 10}, 0.5, ""},
                                     {{20, 20, 30, 30}, 0.4, ""},
                                     {{40, 40, 50, 50}, 0.3, ""}};
  CHECK(geom::nms(disjoint, 0.5, 100).size() == 3);
  CHECK(geom::nms(disjoint, 0.5, 2).size() == 2);
}

TEST_CASE("nms six-box fixture equals oracle") {
  std::vector<ScoredBox> boxes = {
      {{0, 0, 20, 20}, 0.95, ""},  {{2, 2, 22, 22}, 0.90, ""},
      {{5, 5, 25, 25}, 0.85, ""},  {{30, 30, 50, 50}, 0.80, ""},
      {{31, 31, 51, 51}, 0.70, ""}, {{60, 0, 80, 20}, 0.60, ""},
  };
  const auto kept = geom::nms(boxes, 0.4, 100);
  const auto expect = nms_oracle(boxes, 0.4, 100);
  REQUIRE(kept.size() == expect.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    CHECK(kept[i].score == expect[i].score);
    CHECK(kept[i].box == expect[i].box);
  }
}

TEST_CASE("nms random instances: oracle equivalence and pairwise bound") {
  rng::SplitMix64 g(2024);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ScoredBox> boxes;
    for (int i = 0; i < 10; ++i)
      boxes.push_back({random_box(g, 64, 64), g.next_unit(), ""});
    const double thr = 0.3 + 0.4 * g.next_unit();
    const auto kept = geom::nms(boxes, thr, 10);
    const auto expect = nms_oracle(boxes, thr, 10);

    REQUIRE(kept.size() == expect.size());
    for (std::size_t i = 0; i < kept.size(); ++i)
      CHECK(kept[i].box == expect[i].box);
    // every kept pair respects the threshold, scores non-increasing
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i > 0) CHECK(kept[i - 1].score >= kept[i].score);
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        CHECK(geom::iou(kept[i].box, kept[j].box) <= thr);
    }
  }
}
