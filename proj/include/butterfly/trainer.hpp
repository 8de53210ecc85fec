#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "butterfly/dataset.hpp"
#include "butterfly/detector.hpp"
#include "butterfly/geometry.hpp"

namespace butterfly::train {

struct TrainConfig {
  double initial_lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  long total_iters = 100000;  // full-scale default; desk runs override
  long lr_step = -1;          // -1: 70% of total_iters
  double step_factor = 0.1;
  int rpn_batch = 256;
  double positive_fraction = 0.5;
  int roi_batch = 32;
  double roi_positive_fraction = 0.25;
  double roi_fg_iou = 0.5;
  long log_every = 10;
  std::uint64_t seed = 0;

  long lr_step_or_default() const {
    return lr_step >= 0 ? lr_step : (total_iters * 7) / 10;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// One velocity buffer per parameter tensor.
struct OptimizerState {
  net::DetectorParams velocity;

  static OptimizerState zeros_like(const net::DetectorParams& params) {
    return {params.zeros_like()};
  }
};

// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Throws Error on
// a non-finite update.
void sgd_step(net::DetectorParams& params, const net::DetectorParams& grads,
              OptimizerState& state, double lr, double momentum,
              double weight_decay);

double lr_at(long iteration, const TrainConfig& config);

// Up to `batch` anchor indices; positives capped at
// pos_fraction*batch, the rest filled with negatives. Ignore entries are
// never sampled. Result is sorted ascending.
std::vector<int> sample_rpn_minibatch(std::span<const geom::AnchorLabel> labels,
                                      int batch, double pos_fraction,
                                      std::uint64_t seed);

struct Checkpoint {
  net::DetectorParams params;
  long iteration = 0;
  TrainConfig config;
  std::vector<std::string> vocabulary;  // class index i+1 <-> vocabulary[i]
};

// Versioned little-endian binary container; round trip is bit exact.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Runs the full loop: seeded image schedule, forward, anchor
// assignment/sampling, losses, backward, SGD. Emits a CSV loss log
// ("iteration,total,cls,reg,roi_cls") if loss_log is non-null. Throws
// Error on divergence, naming the iteration.
Checkpoint train(const data::DatasetManifest& manifest,
                 const std::filesystem::path& image_root,
                 const net::DetectorConfig& det_config,
                 const TrainConfig& config, std::ostream* loss_log = nullptr);

struct Prediction {
  std::string image_id;
  std::string species;
  double score = 0;
  geom::Box box;  // original image coordinates
};

// forward -> proposals -> roi classification -> per-class NMS; keeps
// every box with score >= score_threshold. Unreadable images are
// skipped; a note per skip is appended to warnings when given.
std::vector<Prediction> predict(const Checkpoint& ckpt,
                                const data::DatasetManifest& manifest,
                                const std::filesystem::path& image_root,
                                double score_threshold, double nms_threshold,
                                std::vector<std::string>* warnings = nullptr);

// Prediction JSON-lines: {image_id, species, score, x_min, ...}.
void save_predictions(std::span<const Prediction> preds,
                      std::span<const std::string> warnings,
                      const std::filesystem::path& path);
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace butterfly::train
