#include "butterfly/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "butterfly/error.hpp"
#include "butterfly/rng.hpp"

namespace butterfly::net {

bool all_finite(const Tensor& t) {
  for (double x : t.v)
    if (!std::isfinite(x)) return false;
  return true;
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (x > 1.0) return 1.0;
  if (x < -1.0) return -1.0;
  return x;
}

std::vector<double> softmax(std::span<const double> logits) {
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  std::vector<double> p(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

AnchorRef anchor_ref(int index, int feat_w, int anchors_per_cell) {
  AnchorRef r;
  r.a = index % anchors_per_cell;
  const int cell = index / anchors_per_cell;
  r.x = cell % feat_w;
  r.y = cell / feat_w;
  return r;
}

namespace {

// stride-1 convolution with pad = k/2 ("same" output size)
Tensor conv2d(const Tensor& in, const ConvParam& p) {
  const int ci = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int co = p.w.dim(0), k = p.w.dim(2);
  const int pad = k / 2;
  Tensor out = Tensor::zeros({co, h, w});
  for (int oc = 0; oc < co; ++oc) {
    double* outp = &out.at(oc, 0, 0);
    const double bias = p.b.v[static_cast<std::size_t>(oc)];
    for (int i = 0; i < h * w; ++i) outp[i] = bias;
    for (int ic = 0; ic < ci; ++ic) {
      const double* inp = &in.at(ic, 0, 0);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = p.w.at4(oc, ic, ky, kx);
          if (wv == 0.0) continue;
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = outp + static_cast<std::size_t>(y) * w;
            const double* irow = inp + static_cast<std::size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
  return out;
}

// Accumulates into din (when non-null) and dp; both must be pre-sized.
void conv2d_backward(const Tensor& in, const ConvParam& p, const Tensor& dout,
                     Tensor* din, ConvParam* dp) {
  const int ci = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int co = p.w.dim(0), k = p.w.dim(2);
  const int pad = k / 2;
  for (int oc = 0; oc < co; ++oc) {
    const double* doutp = &dout.at(oc, 0, 0);
    double db = 0;
    for (int i = 0; i < h * w; ++i) db += doutp[i];
    dp->b.v[static_cast<std::size_t>(oc)] += db;
    for (int ic = 0; ic < ci; ++ic) {
      const double* inp = &in.at(ic, 0, 0);
      double* dinp = din ? &din->at(ic, 0, 0) : nullptr;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          const double wv = p.w.at4(oc, ic, ky, kx);
          double dw = 0;
          for (int y = y0; y < y1; ++y) {
            const double* drow = doutp + static_cast<std::size_t>(y) * w;
            const double* irow = inp + static_cast<std::size_t>(y + dy) * w + dx;
            double* dirow =
                dinp ? dinp + static_cast<std::size_t>(y + dy) * w + dx : nullptr;
            for (int x = x0; x < x1; ++x) {
              dw += drow[x] * irow[x];
              if (dirow) dirow[x] += wv * drow[x];
            }
          }
          dp->w.at4(oc, ic, ky, kx) += dw;
        }
      }
    }
  }
}

void relu_inplace(Tensor& t) {
  for (double& x : t.v) x = x > 0 ? x : 0;
}

// d <- d * 1[activation > 0], using the cached post-relu output
void relu_backward_inplace(const Tensor& post, Tensor& d) {
  for (std::size_t i = 0; i < d.v.size(); ++i)
    if (post.v[i] <= 0) d.v[i] = 0;
}

Tensor maxpool2(const Tensor& in, std::vector<int>& argmax) {
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x, ++o) {
        int best = (ch * h + 2 * y) * w + 2 * x;
        double bv = in.v[static_cast<std::size_t>(best)];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
            const double v = in.v[static_cast<std::size_t>(idx)];
            if (v > bv) {
              bv = v;
              best = idx;
            }
          }
        }
        out.v[o] = bv;
        argmax[o] = best;
      }
    }
  }
  return out;
}

void maxpool2_backward(const std::vector<int>& argmax, const Tensor& dout,
                       Tensor& din) {
  for (std::size_t o = 0; o < dout.v.size(); ++o)
    din.v[static_cast<std::size_t>(argmax[o])] += dout.v[o];
}

void check_finite(const Tensor& t, const char* stage) {
  if (!all_finite(t))
    throw Error(std::string("non-finite activation in ") + stage);
}

ConvParam init_conv(int out_c, int in_c, int k, rng::SplitMix64& g) {
  ConvParam p;
  p.w = Tensor::zeros({out_c, in_c, k, k});
  p.b = Tensor::zeros({out_c});
  const double s = std::sqrt(1.0 / (in_c * k * k));
  for (double& x : p.w.v) x = g.next_in(-s, s);
  for (double& x : p.b.v) x = g.next_in(-s, s);
  return p;
}

}  // namespace

DetectorParams DetectorParams::init(const DetectorConfig& config,
                                    std::uint64_t seed) {
  if (config.num_classes <= 0)
    throw Error("DetectorParams::init: num_classes must be positive");
  if (config.input_size % config.stride() != 0 || config.feat_size() < 1)
    throw Error("DetectorParams::init: input_size must be a positive multiple of 8");
  rng::SplitMix64 g(rng::derive_seed(seed, "detector-init"));
  DetectorParams p;
  p.config = config;
  const auto& ch = config.backbone_channels;
  p.conv1 = init_conv(ch[0], 3, 3, g);
  p.conv2 = init_conv(ch[1], ch[0], 3, g);
  p.conv3 = init_conv(ch[2], ch[1], 3, g);
  p.rpn_conv = init_conv(config.rpn_channels, ch[2], 3, g);
  p.rpn_score = init_conv(2 * config.anchors_per_cell(), config.rpn_channels, 1, g);
  p.rpn_delta = init_conv(4 * config.anchors_per_cell(), config.rpn_channels, 1, g);
  const int fc_in = ch[2] * config.roi_size * config.roi_size;
  const int fc_out = config.num_classes + 1;
  p.fc_w = Tensor::zeros({fc_out, fc_in});
  p.fc_b = Tensor::zeros({fc_out});
  const double s = std::sqrt(1.0 / fc_in);
  for (double& x : p.fc_w.v) x = g.next_in(-s, s);
  for (double& x : p.fc_b.v) x = g.next_in(-s, s);
  return p;
}

DetectorParams DetectorParams::zeros_like() const {
  DetectorParams z = *this;
  z.for_each_tensor([](const char*, Tensor& t) { t.zero(); });
  return z;
}

std::size_t DetectorParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&n](const char*, const Tensor& t) { n += t.size(); });
  return n;
}

ForwardCache forward(const img::RasterImage& resized,
                     const DetectorParams& params) {
  const auto& cfg = params.config;
  const int s = cfg.input_size;
  if (resized.width != s || resized.height != s)
    throw Error("forward: image must be resized to " + std::to_string(s) + "x" +
                std::to_string(s));

  ForwardCache c;
  c.x0 = Tensor::zeros({3, s, s});
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int ch = 0; ch < 3; ++ch)
        c.x0.at(ch, y, x) = resized.at(x, y, ch) / 255.0 - 0.5;

  c.a1 = conv2d(c.x0, params.conv1);
  relu_inplace(c.a1);
  check_finite(c.a1, "conv1");
  c.p1 = maxpool2(c.a1, c.arg1);

  c.a2 = conv2d(c.p1, params.conv2);
  relu_inplace(c.a2);
  check_finite(c.a2, "conv2");
  c.p2 = maxpool2(c.a2, c.arg2);

  c.a3 = conv2d(c.p2, params.conv3);
  relu_inplace(c.a3);
  check_finite(c.a3, "conv3");
  c.feat = maxpool2(c.a3, c.arg3);

  c.rpn_a = conv2d(c.feat, params.rpn_conv);
  relu_inplace(c.rpn_a);
  check_finite(c.rpn_a, "rpn_conv");
  c.rpn_scores = conv2d(c.rpn_a, params.rpn_score);
  check_finite(c.rpn_scores, "rpn_score");
  c.rpn_deltas = conv2d(c.rpn_a, params.rpn_delta);
  check_finite(c.rpn_deltas, "rpn_delta");
  return c;
}

RpnLossTerms rpn_loss(const Tensor& scores, const Tensor& deltas,
                      std::span<const geom::AnchorLabel> labels,
                      std::span<const geom::BoxDelta> targets,
                      std::span<const int> sampled, const RpnLossConfig& cfg,
                      Tensor* dscores, Tensor* ddeltas) {
  const int a_per_cell = scores.dim(0) / 2;
  const int fw = scores.dim(2);
  double cls_sum = 0, reg_sum = 0;
  for (int idx : sampled) {
    const auto& label = labels[static_cast<std::size_t>(idx)];
    if (label.type == geom::AnchorLabel::Type::Ignore)
      throw Error("rpn_loss: sampled anchors must not be Ignore");
    const bool positive = label.type == geom::AnchorLabel::Type::Positive;
    const auto [a, y, x] = anchor_ref(idx, fw, a_per_cell);

    const double zbg = scores.at(2 * a, y, x);
    const double zfg = scores.at(2 * a + 1, y, x);
    // log softmax over the (background, object) pair
    const double m = std::max(zbg, zfg);
    const double lse = m + std::log(std::exp(zbg - m) + std::exp(zfg - m));
    cls_sum += positive ? lse - zfg : lse - zbg;
    if (dscores) {
      const double pfg = std::exp(zfg - lse);
      const double pbg = std::exp(zbg - lse);
      const double t = positive ? 1.0 : 0.0;
      dscores->at(2 * a + 1, y, x) += (pfg - t) / cfg.n_cls;
      dscores->at(2 * a, y, x) += (pbg - (1.0 - t)) / cfg.n_cls;
    }

    if (positive) {
      const auto& tgt = targets[static_cast<std::size_t>(idx)];
      const double pred[4] = {deltas.at(4 * a, y, x), deltas.at(4 * a + 1, y, x),
                              deltas.at(4 * a + 2, y, x),
                              deltas.at(4 * a + 3, y, x)};
      const double want[4] = {tgt.tx, tgt.ty, tgt.tw, tgt.th};
      for (int k = 0; k < 4; ++k) {
        const double d = pred[k] - want[k];
        reg_sum += smooth_l1(d);
        if (ddeltas)
          ddeltas->at(4 * a + k, y, x) +=
              cfg.lambda / cfg.n_reg * smooth_l1_grad(d);
      }
    }
  }
  RpnLossTerms terms;
  terms.cls = cls_sum / cfg.n_cls;
  terms.reg = cfg.lambda / cfg.n_reg * reg_sum;
  terms.total = terms.cls + terms.reg;
  return terms;
}

std::vector<double> objectness(const Tensor& scores, int anchors_per_cell) {
  const int fh = scores.dim(1), fw = scores.dim(2);
  std::vector<double> p(static_cast<std::size_t>(fh) * fw * anchors_per_cell);
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      for (int a = 0; a < anchors_per_cell; ++a) {
        const double zbg = scores.at(2 * a, y, x);
        const double zfg = scores.at(2 * a + 1, y, x);
        const double m = std::max(zbg, zfg);
        const double ebg = std::exp(zbg - m), efg = std::exp(zfg - m);
        p[static_cast<std::size_t>((y * fw + x) * anchors_per_cell + a)] =
            efg / (ebg + efg);
      }
    }
  }
  return p;
}

Tensor roi_pool(const Tensor& feat, const geom::Box& proposal, int stride,
                int roi_size, RoiPoolCache* cache) {
  const int c = feat.dim(0), fh = feat.dim(1), fw = feat.dim(2);
  // footprint on the feature map, at least one cell
  int fx0 = static_cast<int>(std::floor(proposal.x_min / stride));
  int fy0 = static_cast<int>(std::floor(proposal.y_min / stride));
  int fx1 = static_cast<int>(std::ceil(proposal.x_max / stride));
  int fy1 = static_cast<int>(std::ceil(proposal.y_max / stride));
  fx0 = std::clamp(fx0, 0, fw - 1);
  fy0 = std::clamp(fy0, 0, fh - 1);
  fx1 = std::clamp(fx1, fx0 + 1, fw);
  fy1 = std::clamp(fy1, fy0 + 1, fh);
  const int w = fx1 - fx0, h = fy1 - fy0;

  Tensor out = Tensor::zeros({c, roi_size, roi_size});
  if (cache) cache->argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int by = 0; by < roi_size; ++by) {
      int ys = fy0 + (by * h) / roi_size;
      int ye = fy0 + ((by + 1) * h + roi_size - 1) / roi_size;
      if (ye <= ys) ye = ys + 1;
      for (int bx = 0; bx < roi_size; ++bx, ++o) {
        int xs = fx0 + (bx * w) / roi_size;
        int xe = fx0 + ((bx + 1) * w + roi_size - 1) / roi_size;
        if (xe <= xs) xe = xs + 1;
        int best = (ch * fh + ys) * fw + xs;
        double bv = feat.v[static_cast<std::size_t>(best)];
        for (int y = ys; y < ye; ++y) {
          for (int x = xs; x < xe; ++x) {
            const int idx = (ch * fh + y) * fw + x;
            const double v = feat.v[static_cast<std::size_t>(idx)];
            if (v > bv) {
              bv = v;
              best = idx;
            }
          }
        }
        out.v[o] = bv;
        if (cache) cache->argmax[o] = best;
      }
    }
  }
  return out;
}

std::vector<double> classify_roi(const Tensor& pooled,
                                 const DetectorParams& params) {
  const int classes = params.fc_w.dim(0);
  const int n = params.fc_w.dim(1);
  if (static_cast<std::size_t>(n) != pooled.size())
    throw Error("classify_roi: pooled size does not match classifier input");
  std::vector<double> logits(static_cast<std::size_t>(classes));
  for (int j = 0; j < classes; ++j) {
    double z = params.fc_b.v[static_cast<std::size_t>(j)];
    const double* wrow = &params.fc_w.at(j, 0);
    for (int i = 0; i < n; ++i) z += wrow[i] * pooled.v[static_cast<std::size_t>(i)];
    logits[static_cast<std::size_t>(j)] = z;
  }
  return softmax(logits);
}

LossBreakdown compute_loss_and_backward(const ForwardCache& cache,
                                        const DetectorParams& params,
                                        const LossInputs& inputs,
                                        DetectorParams* grads) {
  const auto& cfg = params.config;
  LossBreakdown out;

  Tensor dscores = Tensor::zeros(
      {cache.rpn_scores.dim(0), cache.rpn_scores.dim(1), cache.rpn_scores.dim(2)});
  Tensor ddeltas = Tensor::zeros(
      {cache.rpn_deltas.dim(0), cache.rpn_deltas.dim(1), cache.rpn_deltas.dim(2)});
  const auto rpn_terms =
      rpn_loss(cache.rpn_scores, cache.rpn_deltas, inputs.labels, inputs.targets,
               inputs.sampled, inputs.rpn, &dscores, &ddeltas);
  out.rpn_cls = rpn_terms.cls;
  out.rpn_reg = rpn_terms.reg;

  // ROI classification: forward, cross-entropy, gradients into the
  // classifier and the shared feature map. Proposal coordinates are
  // constants.
  Tensor dfeat = Tensor::zeros({cache.feat.dim(0), cache.feat.dim(1),
                                cache.feat.dim(2)});
  const std::size_t n_rois = inputs.rois.size();
  if (n_rois > 0) {
    const int classes = params.fc_w.dim(0);
    const int n = params.fc_w.dim(1);
    double loss_sum = 0;
    for (std::size_t r = 0; r < n_rois; ++r) {
      RoiPoolCache pc;
      const Tensor pooled =
          roi_pool(cache.feat, inputs.rois[r], cfg.stride(), cfg.roi_size, &pc);
      std::vector<double> logits(static_cast<std::size_t>(classes));
      for (int j = 0; j < classes; ++j) {
        double z = params.fc_b.v[static_cast<std::size_t>(j)];
        const double* wrow = &params.fc_w.at(j, 0);
        for (int i = 0; i < n; ++i)
          z += wrow[i] * pooled.v[static_cast<std::size_t>(i)];
        logits[static_cast<std::size_t>(j)] = z;
      }
      double m = logits[0];
      for (double z : logits) m = std::max(m, z);
      double lse = 0;
      for (double z : logits) lse += std::exp(z - m);
      lse = m + std::log(lse);
      const int label = inputs.roi_labels[r];
      loss_sum += lse - logits[static_cast<std::size_t>(label)];

      std::vector<double> dpooled(static_cast<std::size_t>(n), 0.0);
      for (int j = 0; j < classes; ++j) {
        const double pj = std::exp(logits[static_cast<std::size_t>(j)] - lse);
        const double dz =
            (pj - (j == label ? 1.0 : 0.0)) / static_cast<double>(n_rois);
        grads->fc_b.v[static_cast<std::size_t>(j)] += dz;
        double* dwrow = &grads->fc_w.at(j, 0);
        const double* wrow = &params.fc_w.at(j, 0);
        for (int i = 0; i < n; ++i) {
          dwrow[i] += dz * pooled.v[static_cast<std::size_t>(i)];
          dpooled[static_cast<std::size_t>(i)] += dz * wrow[i];
        }
      }
      for (std::size_t i = 0; i < dpooled.size(); ++i)
        dfeat.v[static_cast<std::size_t>(pc.argmax[i])] += dpooled[i];
    }
    out.roi_cls = loss_sum / static_cast<double>(n_rois);
  }
  out.total = out.rpn_cls + out.rpn_reg + out.roi_cls;

  // RPN heads back to the shared map.
  Tensor drpn_a = Tensor::zeros(
      {cache.rpn_a.dim(0), cache.rpn_a.dim(1), cache.rpn_a.dim(2)});
  conv2d_backward(cache.rpn_a, params.rpn_score, dscores, &drpn_a,
                  &grads->rpn_score);
  conv2d_backward(cache.rpn_a, params.rpn_delta, ddeltas, &drpn_a,
                  &grads->rpn_delta);
  relu_backward_inplace(cache.rpn_a, drpn_a);
  conv2d_backward(cache.feat, params.rpn_conv, drpn_a, &dfeat,
                  &grads->rpn_conv);

  // Backbone.
  Tensor da3 =
      Tensor::zeros({cache.a3.dim(0), cache.a3.dim(1), cache.a3.dim(2)});
  maxpool2_backward(cache.arg3, dfeat, da3);
  relu_backward_inplace(cache.a3, da3);
  Tensor dp2 =
      Tensor::zeros({cache.p2.dim(0), cache.p2.dim(1), cache.p2.dim(2)});
  conv2d_backward(cache.p2, params.conv3, da3, &dp2, &grads->conv3);

  Tensor da2 =
      Tensor::zeros({cache.a2.dim(0), cache.a2.dim(1), cache.a2.dim(2)});
  maxpool2_backward(cache.arg2, dp2, da2);
  relu_backward_inplace(cache.a2, da2);
  Tensor dp1 =
      Tensor::zeros({cache.p1.dim(0), cache.p1.dim(1), cache.p1.dim(2)});
  conv2d_backward(cache.p1, params.conv2, da2, &dp1, &grads->conv2);

  Tensor da1 =
      Tensor::zeros({cache.a1.dim(0), cache.a1.dim(1), cache.a1.dim(2)});
  maxpool2_backward(cache.arg1, dp1, da1);
  relu_backward_inplace(cache.a1, da1);
  conv2d_backward(cache.x0, params.conv1, da1, nullptr, &grads->conv1);

  bool finite = std::isfinite(out.total);
  grads->for_each_tensor([&finite](const char*, Tensor& t) {
    if (finite && !all_finite(t)) finite = false;
  });
  if (!finite) throw Error("non-finite gradient");
  return out;
}

}  // namespace butterfly::net
