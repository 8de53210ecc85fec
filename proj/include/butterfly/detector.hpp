#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "butterfly/box.hpp"
#include "butterfly/geometry.hpp"
#include "butterfly/image.hpp"
#include "butterfly/tensor.hpp"

namespace butterfly::net {

// Fixed topology, configurable widths:
//   input (3, S, S) normalized to [-0.5, 0.5]
//   3x [conv 3x3 -> relu -> maxpool 2x2]   channels c1 -> c2 -> c3
//   rpn: conv 3x3 -> relu, then 1x1 score head (2 per anchor) and 1x1
//   delta head (4 per anchor)
//   roi: 4x4 max pool over the shared feature map -> fully connected
//   softmax over num_classes + 1 (class 0 is background)
// The three pools give feature stride 8.
struct DetectorConfig {
  int input_size = 128;
  std::array<int, 3> backbone_channels{8, 16, 32};
  int rpn_channels = 32;
  int num_classes = 0;  // foreground classes; background is extra
  int roi_size = 4;
  std::vector<double> anchor_scales{32, 64, 128};
  std::vector<double> anchor_ratios{0.5, 1, 2};
  double proposal_nms_threshold = 0.7;
  int proposal_top_n = 300;

  int stride() const { return 8; }
  int feat_size() const { return input_size / stride(); }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }
  int anchor_count() const {
    return feat_size() * feat_size() * anchors_per_cell();
  }

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) =
      default;
};

struct ConvParam {
  Tensor w;  // (out_c, in_c, k, k)
  Tensor b;  // (out_c)

  friend bool operator==(const ConvParam&, const ConvParam&) = default;
};

struct DetectorParams {
  DetectorConfig config;
  ConvParam conv1, conv2, conv3;
  ConvParam rpn_conv;   // 3x3
  ConvParam rpn_score;  // 1x1, 2 * anchors_per_cell outputs
  ConvParam rpn_delta;  // 1x1, 4 * anchors_per_cell outputs
  Tensor fc_w;          // (num_classes + 1, c3 * roi_size * roi_size)
  Tensor fc_b;          // (num_classes + 1)

  // Uniform [-s, s] with s = sqrt(1/fan_in), drawn from a seeded stream
  // in for_each_tensor order.
  static DetectorParams init(const DetectorConfig& config, std::uint64_t seed);

  // Same shapes, all zeros. Used for gradients and optimizer state.
  DetectorParams zeros_like() const;

  std::size_t parameter_count() const;

  template <class F>
  void for_each_tensor(F&& f) {
    f("conv1.w", conv1.w);
    f("conv1.b", conv1.b);
    f("conv2.w", conv2.w);
    f("conv2.b", conv2.b);
    f("conv3.w", conv3.w);
    f("conv3.b", conv3.b);
    f("rpn_conv.w", rpn_conv.w);
    f("rpn_conv.b", rpn_conv.b);
    f("rpn_score.w", rpn_score.w);
    f("rpn_score.b", rpn_score.b);
    f("rpn_delta.w", rpn_delta.w);
    f("rpn_delta.b", rpn_delta.b);
    f("fc.w", fc_w);
    f("fc.b", fc_b);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<DetectorParams*>(this)->for_each_tensor(
        [&](const char* name, Tensor& t) { f(name, const_cast<const Tensor&>(t)); });
  }

  friend bool operator==(const DetectorParams&, const DetectorParams&) =
      default;
};

// Everything the backward pass needs from a forward evaluation.
struct ForwardCache {
  Tensor x0;                    // normalized input
  Tensor a1, p1, a2, p2, a3;    // relu outputs and pooled maps
  std::vector<int> arg1, arg2, arg3;  // pool argmax, flat indices
  Tensor feat;                  // == pool3 output, stride-8 map
  Tensor rpn_a;                 // rpn conv relu output
  Tensor rpn_scores;            // (2A, fh, fw) logits
  Tensor rpn_deltas;            // (4A, fh, fw)
};

// Throws Error on non-finite activations.
ForwardCache forward(const img::RasterImage& resized,
                     const DetectorParams& params);

double smooth_l1(double x);
double smooth_l1_grad(double x);

// lambda weights the regression term; n_cls and n_reg normalize the two
// sums. hi/lo are the anchor assignment thresholds.
struct RpnLossConfig {
  double lambda = 10.0;
  double n_cls = 1.0;
  double n_reg = 1.0;
  double anchor_hi = 0.7;
  double anchor_lo = 0.3;
};

struct RpnLossTerms {
  double total = 0;
  double cls = 0;
  double reg = 0;
};

// Anchor index convention: anchor a at cell (y, x) of an (fh, fw) map
// has global index (y * fw + x) * A + a; its score logits live in
// channels (2a, 2a+1) = (background, object) and deltas in 4a..4a+3.
struct AnchorRef {
  int a = 0;
  int y = 0;
  int x = 0;
};
AnchorRef anchor_ref(int index, int feat_w, int anchors_per_cell);

// Eq-style multi-task loss over a sampled set of anchors (no Ignore
// entries): (1/n_cls) sum BCE(p_i, p_i*) + lambda (1/n_reg) sum_pos
// smooth_l1 components of (t_i - t_i*). If dscores/ddeltas are given,
// gradients are accumulated into them.
RpnLossTerms rpn_loss(const Tensor& scores, const Tensor& deltas,
                      std::span<const geom::AnchorLabel> labels,
                      std::span<const geom::BoxDelta> targets,
                      std::span<const int> sampled, const RpnLossConfig& cfg,
                      Tensor* dscores = nullptr, Tensor* ddeltas = nullptr);

// Objectness probability per anchor (softmax over the logit pair).
std::vector<double> objectness(const Tensor& scores, int anchors_per_cell);

struct RoiPoolCache {
  std::vector<int> argmax;  // flat index into feat per pooled element
};

// Max pool over a roi_size x roi_size partition of the proposal's
// feature-map footprint. Sub-cell proposals clamp to one cell; bins
// with an empty footprint replicate the nearest cell.
Tensor roi_pool(const Tensor& feat, const geom::Box& proposal_input_coords,
                int stride, int roi_size, RoiPoolCache* cache = nullptr);

// Softmax class probabilities (num_classes + 1) for one pooled roi.
std::vector<double> classify_roi(const Tensor& pooled,
                                 const DetectorParams& params);

// Inputs of a single training step's loss, with all sampling decisions
// already made. Proposals are treated as constants: no gradient flows
// through box coordinates.
struct LossInputs {
  std::vector<geom::AnchorLabel> labels;   // per anchor
  std::vector<geom::BoxDelta> targets;     // per anchor, valid at positives
  std::vector<int> sampled;                // anchor indices, no Ignore
  RpnLossConfig rpn;
  std::vector<geom::Box> rois;             // input-image coordinates
  std::vector<int> roi_labels;             // 0 = background
};

struct LossBreakdown {
  double total = 0;
  double rpn_cls = 0;
  double rpn_reg = 0;
  double roi_cls = 0;
};

// Evaluates the combined loss and accumulates exact analytic gradients
// of every parameter into grads (pre-zeroed by the caller). Throws
// Error on non-finite gradients.
LossBreakdown compute_loss_and_backward(const ForwardCache& cache,
                                        const DetectorParams& params,
                                        const LossInputs& inputs,
                                        DetectorParams* grads);

std::vector<double> softmax(std::span<const double> logits);

}  // namespace butterfly::net
