#include "butterfly/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <ostream>

#include <json.hpp>

#include "butterfly/error.hpp"
#include "butterfly/image.hpp"
#include "butterfly/rng.hpp"

namespace butterfly::train {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void sgd_step(net::DetectorParams& params, const net::DetectorParams& grads,
              OptimizerState& state, double lr, double momentum,
              double weight_decay) {
  std::vector<net::Tensor*> w, v;
  std::vector<const net::Tensor*> g;
  params.for_each_tensor([&w](const char*, net::Tensor& t) { w.push_back(&t); });
  state.velocity.for_each_tensor(
      [&v](const char*, net::Tensor& t) { v.push_back(&t); });
  grads.for_each_tensor(
      [&g](const char*, const net::Tensor& t) { g.push_back(&t); });
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (w[t]->size() != g[t]->size() || w[t]->size() != v[t]->size())
      throw Error("sgd_step: tensor shape mismatch");
    for (std::size_t i = 0; i < w[t]->size(); ++i) {
      double& vel = v[t]->v[i];
      double& weight = w[t]->v[i];
      vel = momentum * vel - lr * (g[t]->v[i] + weight_decay * weight);
      weight += vel;
      if (!std::isfinite(weight)) throw Error("sgd_step: non-finite update");
    }
  }
}

double lr_at(long iteration, const TrainConfig& config) {
  return iteration < config.lr_step_or_default()
             ? config.initial_lr
             : config.initial_lr * config.step_factor;
}

std::vector<int> sample_rpn_minibatch(std::span<const geom::AnchorLabel> labels,
                                      int batch, double pos_fraction,
                                      std::uint64_t seed) {
  std::vector<int> positives, negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].type == geom::AnchorLabel::Type::Positive)
      positives.push_back(static_cast<int>(i));
    else if (labels[i].type == geom::AnchorLabel::Type::Negative)
      negatives.push_back(static_cast<int>(i));
  }
  rng::SplitMix64 g(seed);
  rng::shuffle(positives, g);
  rng::shuffle(negatives, g);
  const auto cap = static_cast<std::size_t>(pos_fraction * batch);
  const std::size_t n_pos = std::min(positives.size(), cap);
  const std::size_t n_neg =
      std::min(negatives.size(), static_cast<std::size_t>(batch) - n_pos);
  std::vector<int> out(positives.begin(), positives.begin() + n_pos);
  out.insert(out.end(), negatives.begin(), negatives.begin() + n_neg);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

// ---- binary checkpoint container ------------------------------------
// Little-endian; doubles stored bit-exact.

constexpr char kMagic[8] = {'B', 'F', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1u << 20)) throw Error("checkpoint: unreasonable string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("checkpoint: truncated file");
  return s;
}

void write_tensor(std::ostream& out, const std::string& name,
                  const net::Tensor& t) {
  write_string(out, name);
  write_pod<std::uint64_t>(out, t.shape.size());
  for (int d : t.shape) write_pod<std::int32_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
}

void read_tensor_into(std::istream& in, const std::string& expect_name,
                      net::Tensor& t) {
  const std::string name = read_string(in);
  if (name != expect_name)
    throw Error("checkpoint: expected tensor '" + expect_name + "', found '" +
                name + "'");
  const auto ndims = read_pod<std::uint64_t>(in);
  std::vector<int> shape(ndims);
  for (auto& d : shape) d = read_pod<std::int32_t>(in);
  if (shape != t.shape)
    throw Error("checkpoint: tensor '" + name + "' shape mismatch");
  in.read(reinterpret_cast<char*>(t.v.data()),
          static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  if (!in) throw Error("checkpoint: truncated tensor payload");
}

void write_config(std::ostream& out, const net::DetectorConfig& c) {
  write_pod<std::int32_t>(out, c.input_size);
  for (int ch : c.backbone_channels) write_pod<std::int32_t>(out, ch);
  write_pod<std::int32_t>(out, c.rpn_channels);
  write_pod<std::int32_t>(out, c.num_classes);
  write_pod<std::int32_t>(out, c.roi_size);
  write_pod<std::uint64_t>(out, c.anchor_scales.size());
  for (double s : c.anchor_scales) write_pod<double>(out, s);
  write_pod<std::uint64_t>(out, c.anchor_ratios.size());
  for (double r : c.anchor_ratios) write_pod<double>(out, r);
  write_pod<double>(out, c.proposal_nms_threshold);
  write_pod<std::int32_t>(out, c.proposal_top_n);
}

net::DetectorConfig read_config(std::istream& in) {
  net::DetectorConfig c;
  c.input_size = read_pod<std::int32_t>(in);
  for (int& ch : c.backbone_channels) ch = read_pod<std::int32_t>(in);
  c.rpn_channels = read_pod<std::int32_t>(in);
  c.num_classes = read_pod<std::int32_t>(in);
  c.roi_size = read_pod<std::int32_t>(in);
  c.anchor_scales.resize(read_pod<std::uint64_t>(in));
  for (double& s : c.anchor_scales) s = read_pod<double>(in);
  c.anchor_ratios.resize(read_pod<std::uint64_t>(in));
  for (double& r : c.anchor_ratios) r = read_pod<double>(in);
  c.proposal_nms_threshold = read_pod<double>(in);
  c.proposal_top_n = read_pod<std::int32_t>(in);
  return c;
}

void write_train_config(std::ostream& out, const TrainConfig& c) {
  write_pod<double>(out, c.initial_lr);
  write_pod<double>(out, c.momentum);
  write_pod<double>(out, c.weight_decay);
  write_pod<std::int64_t>(out, c.total_iters);
  write_pod<std::int64_t>(out, c.lr_step);
  write_pod<double>(out, c.step_factor);
  write_pod<std::int32_t>(out, c.rpn_batch);
  write_pod<double>(out, c.positive_fraction);
  write_pod<std::int32_t>(out, c.roi_batch);
  write_pod<double>(out, c.roi_positive_fraction);
  write_pod<double>(out, c.roi_fg_iou);
  write_pod<std::int64_t>(out, c.log_every);
  write_pod<std::uint64_t>(out, c.seed);
}

TrainConfig read_train_config(std::istream& in) {
  TrainConfig c;
  c.initial_lr = read_pod<double>(in);
  c.momentum = read_pod<double>(in);
  c.weight_decay = read_pod<double>(in);
  c.total_iters = read_pod<std::int64_t>(in);
  c.lr_step = read_pod<std::int64_t>(in);
  c.step_factor = read_pod<double>(in);
  c.rpn_batch = read_pod<std::int32_t>(in);
  c.positive_fraction = read_pod<double>(in);
  c.roi_batch = read_pod<std::int32_t>(in);
  c.roi_positive_fraction = read_pod<double>(in);
  c.roi_fg_iou = read_pod<double>(in);
  c.log_every = read_pod<std::int64_t>(in);
  c.seed = read_pod<std::uint64_t>(in);
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_config(out, ckpt.params.config);
  write_train_config(out, ckpt.config);
  write_pod<std::int64_t>(out, ckpt.iteration);
  write_pod<std::uint64_t>(out, ckpt.vocabulary.size());
  for (const auto& s : ckpt.vocabulary) write_string(out, s);
  std::uint64_t n_tensors = 0;
  ckpt.params.for_each_tensor(
      [&n_tensors](const char*, const net::Tensor&) { ++n_tensors; });
  write_pod<std::uint64_t>(out, n_tensors);
  ckpt.params.for_each_tensor([&out](const char* name, const net::Tensor& t) {
    write_tensor(out, name, t);
  });
  if (!out) throw Error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error("not a checkpoint file: " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto det_config = read_config(in);
  ckpt.config = read_train_config(in);
  ckpt.iteration = read_pod<std::int64_t>(in);
  ckpt.vocabulary.resize(read_pod<std::uint64_t>(in));
  for (auto& s : ckpt.vocabulary) s = read_string(in);
  ckpt.params = net::DetectorParams::init(det_config, 0);
  const auto n_tensors = read_pod<std::uint64_t>(in);
  std::uint64_t expect = 0;
  ckpt.params.for_each_tensor(
      [&expect](const char*, const net::Tensor&) { ++expect; });
  if (n_tensors != expect) throw Error("checkpoint: tensor count mismatch");
  ckpt.params.for_each_tensor([&in](const char* name, net::Tensor& t) {
    read_tensor_into(in, name, t);
  });
  return ckpt;
}

namespace {

struct ScaledRecord {
  img::RasterImage resized;
  std::vector<geom::Box> gt_boxes;     // input coordinates
  std::vector<int> gt_classes;         // 1-based; 0 is background
};

ScaledRecord load_scaled(const data::AnnotatedImage& rec, const fs::path& root,
                         int input_size,
                         const std::map<std::string, int>& class_of) {
  ScaledRecord out;
  img::RasterImage raw;
  try {
    raw = img::read_ppm(root / rec.path);
  } catch (const Error& e) {
    throw Error("record '" + rec.image_id + "': " + e.what());
  }
  out.resized = img::resize_nearest(raw, input_size, input_size);
  const double sx = static_cast<double>(input_size) / rec.width;
  const double sy = static_cast<double>(input_size) / rec.height;
  for (const auto& sb : rec.boxes) {
    out.gt_boxes.push_back({sb.box.x_min * sx, sb.box.y_min * sy,
                            sb.box.x_max * sx, sb.box.y_max * sy});
    out.gt_classes.push_back(class_of.at(sb.species));
  }
  return out;
}

std::vector<geom::ScoredBox> make_proposals(
    const net::ForwardCache& cache, const net::DetectorConfig& cfg,
    const std::vector<geom::Anchor>& anchors) {
  const auto obj = net::objectness(cache.rpn_scores, cfg.anchors_per_cell());
  const int fw = cfg.feat_size();
  const int a_per_cell = cfg.anchors_per_cell();
  const double s = cfg.input_size;
  std::vector<geom::ScoredBox> candidates;
  candidates.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto [a, y, x] = net::anchor_ref(static_cast<int>(i), fw, a_per_cell);
    const geom::BoxDelta d{cache.rpn_deltas.at(4 * a, y, x),
                           cache.rpn_deltas.at(4 * a + 1, y, x),
                           cache.rpn_deltas.at(4 * a + 2, y, x),
                           cache.rpn_deltas.at(4 * a + 3, y, x)};
    const geom::Box box = geom::decode_delta(d, anchors[i], s, s);
    if (box.width() < 1.0 || box.height() < 1.0) continue;
    candidates.push_back({box, obj[i], ""});
  }
  return geom::nms(std::move(candidates), cfg.proposal_nms_threshold,
                   cfg.proposal_top_n);
}

// Proposals plus the gt boxes themselves, labeled by best-IOU gt.
void make_rois(const std::vector<geom::ScoredBox>& proposals,
               const ScaledRecord& rec, double fg_iou,
               std::vector<geom::Box>* rois, std::vector<int>* labels) {
  for (const auto& p : proposals) rois->push_back(p.box);
  for (const auto& g : rec.gt_boxes) rois->push_back(g);
  for (const auto& r : *rois) {
    double best = 0;
    int best_class = 0;
    for (std::size_t g = 0; g < rec.gt_boxes.size(); ++g) {
      const double v = geom::iou(r, rec.gt_boxes[g]);
      if (v > best) {
        best = v;
        best_class = rec.gt_classes[g];
      }
    }
    labels->push_back(best >= fg_iou ? best_class : 0);
  }
}

void sample_rois(std::vector<geom::Box>& rois, std::vector<int>& labels,
                 int batch, double pos_fraction, std::uint64_t seed) {
  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] > 0 ? fg : bg).push_back(i);
  rng::SplitMix64 g(seed);
  rng::shuffle(fg, g);
  rng::shuffle(bg, g);
  const auto cap = static_cast<std::size_t>(pos_fraction * batch);
  const std::size_t n_fg = std::min(fg.size(), cap);
  const std::size_t n_bg =
      std::min(bg.size(), static_cast<std::size_t>(batch) - n_fg);
  std::vector<std::size_t> chosen(fg.begin(), fg.begin() + n_fg);
  chosen.insert(chosen.end(), bg.begin(), bg.begin() + n_bg);
  std::sort(chosen.begin(), chosen.end());
  std::vector<geom::Box> out_rois;
  std::vector<int> out_labels;
  for (std::size_t i : chosen) {
    out_rois.push_back(rois[i]);
    out_labels.push_back(labels[i]);
  }
  rois = std::move(out_rois);
  labels = std::move(out_labels);
}

}  // namespace

Checkpoint train(const data::DatasetManifest& manifest, const fs::path& image_root,
                 const net::DetectorConfig& det_config, const TrainConfig& config,
                 std::ostream* loss_log) {
  if (manifest.empty()) throw Error("train: empty manifest");

  std::vector<std::string> vocabulary;
  for (const auto& s : data::species_set(manifest)) vocabulary.push_back(s);
  std::map<std::string, int> class_of;
  for (std::size_t i = 0; i < vocabulary.size(); ++i)
    class_of[vocabulary[i]] = static_cast<int>(i) + 1;

  net::DetectorConfig cfg = det_config;
  cfg.num_classes = static_cast<int>(vocabulary.size());
  net::DetectorParams params = net::DetectorParams::init(cfg, config.seed);
  net::DetectorParams grads = params.zeros_like();
  OptimizerState state = OptimizerState::zeros_like(params);

  const auto anchors =
      geom::generate_anchors(cfg.feat_size(), cfg.feat_size(), cfg.stride(),
                             cfg.anchor_scales, cfg.anchor_ratios);
  const int n_positions = cfg.feat_size() * cfg.feat_size();

  const std::size_t n = manifest.size();
  std::vector<std::size_t> order(n);
  const std::uint64_t schedule_seed = rng::derive_seed(config.seed, "schedule");

  if (loss_log) *loss_log << "iteration,total,cls,reg,roi_cls\n";

  for (long it = 0; it < config.total_iters; ++it) {
    if (it % static_cast<long>(n) == 0) {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      rng::SplitMix64 g(rng::derive_seed(schedule_seed,
                                         static_cast<std::uint64_t>(it / n)));
      rng::shuffle(order, g);
    }
    const auto& rec = manifest.records[order[static_cast<std::size_t>(
        it % static_cast<long>(n))]];
    const ScaledRecord scaled =
        load_scaled(rec, image_root, cfg.input_size, class_of);

    const auto cache = net::forward(scaled.resized, params);
    const auto labels = geom::assign_anchor_labels(
        anchors, scaled.gt_boxes, net::RpnLossConfig{}.anchor_hi,
        net::RpnLossConfig{}.anchor_lo);

    net::LossInputs inputs;
    inputs.labels = labels;
    inputs.targets.resize(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (labels[i].type == geom::AnchorLabel::Type::Positive)
        inputs.targets[i] = geom::encode_delta(
            scaled.gt_boxes[static_cast<std::size_t>(labels[i].gt_index)],
            anchors[i]);
    }
    inputs.sampled = sample_rpn_minibatch(
        labels, config.rpn_batch, config.positive_fraction,
        rng::derive_seed(rng::derive_seed(config.seed, "rpn-sample"),
                         static_cast<std::uint64_t>(it)));
    inputs.rpn.n_cls = static_cast<double>(std::max<std::size_t>(
        1, inputs.sampled.size()));
    inputs.rpn.n_reg = static_cast<double>(n_positions);

    const auto proposals = make_proposals(cache, cfg, anchors);
    make_rois(proposals, scaled, config.roi_fg_iou, &inputs.rois,
              &inputs.roi_labels);
    sample_rois(inputs.rois, inputs.roi_labels, config.roi_batch,
                config.roi_positive_fraction,
                rng::derive_seed(rng::derive_seed(config.seed, "roi-sample"),
                                 static_cast<std::uint64_t>(it)));

    grads.for_each_tensor([](const char*, net::Tensor& t) { t.zero(); });
    net::LossBreakdown loss;
    try {
      loss = net::compute_loss_and_backward(cache, params, inputs, &grads);
    } catch (const Error& e) {
      throw Error("training diverged at iteration " + std::to_string(it) +
                  ": " + e.what());
    }
    if (!std::isfinite(loss.total))
      throw Error("training diverged at iteration " + std::to_string(it));

    sgd_step(params, grads, state, lr_at(it, config), config.momentum,
             config.weight_decay);

    if (loss_log && it % config.log_every == 0) {
      char line[160];
      std::snprintf(line, sizeof(line), "%ld,%.9g,%.9g,%.9g,%.9g\n", it,
                    loss.total, loss.rpn_cls, loss.rpn_reg, loss.roi_cls);
      *loss_log << line;
    }
  }

  Checkpoint ckpt;
  ckpt.params = std::move(params);
  ckpt.iteration = config.total_iters;
  ckpt.config = config;
  ckpt.vocabulary = std::move(vocabulary);
  return ckpt;
}

std::vector<Prediction> predict(const Checkpoint& ckpt,
                                const data::DatasetManifest& manifest,
                                const fs::path& image_root,
                                double score_threshold, double nms_threshold,
                                std::vector<std::string>* warnings) {
  if (ckpt.vocabulary.empty()) throw Error("predict: empty vocabulary");
  const auto& cfg = ckpt.params.config;
  const auto anchors =
      geom::generate_anchors(cfg.feat_size(), cfg.feat_size(), cfg.stride(),
                             cfg.anchor_scales, cfg.anchor_ratios);

  std::vector<Prediction> out;
  for (const auto& rec : manifest.records) {
    img::RasterImage raw;
    try {
      raw = img::read_ppm(image_root / rec.path);
    } catch (const Error& e) {
      if (warnings)
        warnings->push_back("skipped '" + rec.image_id + "': " + e.what());
      continue;
    }
    const auto resized = img::resize_nearest(raw, cfg.input_size, cfg.input_size);
    const auto cache = net::forward(resized, ckpt.params);
    const auto proposals = make_proposals(cache, cfg, anchors);

    // classify every proposal, gather per-class candidates
    std::vector<std::vector<geom::ScoredBox>> per_class(ckpt.vocabulary.size());
    for (const auto& p : proposals) {
      const auto pooled =
          net::roi_pool(cache.feat, p.box, cfg.stride(), cfg.roi_size);
      const auto probs = net::classify_roi(pooled, ckpt.params);
      for (std::size_t c = 0; c < ckpt.vocabulary.size(); ++c) {
        const double score = probs[c + 1];
        if (score >= score_threshold)
          per_class[c].push_back({p.box, score, ckpt.vocabulary[c]});
      }
    }

    const double sx = static_cast<double>(rec.width) / cfg.input_size;
    const double sy = static_cast<double>(rec.height) / cfg.input_size;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      for (const auto& kept : geom::nms(std::move(per_class[c]), nms_threshold, 0)) {
        Prediction pr;
        pr.image_id = rec.image_id;
        pr.species = ckpt.vocabulary[c];
        pr.score = kept.score;
        pr.box = {std::clamp(kept.box.x_min * sx, 0.0, double(rec.width)),
                  std::clamp(kept.box.y_min * sy, 0.0, double(rec.height)),
                  std::clamp(kept.box.x_max * sx, 0.0, double(rec.width)),
                  std::clamp(kept.box.y_max * sy, 0.0, double(rec.height))};
        out.push_back(std::move(pr));
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.species != b.species) return a.species < b.species;
    if (a.score != b.score) return a.score > b.score;
    return a.box < b.box;
  });
  return out;
}

void save_predictions(std::span<const Prediction> preds,
                      std::span<const std::string> warnings,
                      const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write predictions: " + path.string());
  for (const auto& p : preds) {
    ordered_json j;
    j["image_id"] = p.image_id;
    j["species"] = p.species;
    j["score"] = p.score;
    j["x_min"] = p.box.x_min;
    j["y_min"] = p.box.y_min;
    j["x_max"] = p.box.x_max;
    j["y_max"] = p.box.y_max;
    out << j.dump() << "\n";
  }
  for (const auto& w : warnings) {
    ordered_json j;
    j["error"] = w;
    out << j.dump() << "\n";
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<Prediction> load_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions: " + path.string());
  std::vector<Prediction> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = ordered_json::parse(line);
      if (j.contains("error")) continue;  // skip-warning lines
      Prediction p;
      p.image_id = j.at("image_id").get<std::string>();
      p.species = j.at("species").get<std::string>();
      p.score = j.at("score").get<double>();
      p.box = {j.at("x_min").get<double>(), j.at("y_min").get<double>(),
               j.at("x_max").get<double>(), j.at("y_max").get<double>()};
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " +
                  e.what());
    }
  }
  return out;
}

}  // namespace butterfly::train
