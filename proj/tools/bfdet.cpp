// bfdet: butterfly detection pipeline driver. Every stage reads and
// writes plain files (JSON-lines manifests, PPM images, CSV reports),
// so subcommands compose through the filesystem.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "butterfly/augment.hpp"
#include "butterfly/dataset.hpp"
#include "butterfly/error.hpp"
#include "butterfly/evaluation.hpp"
#include "butterfly/synthetic.hpp"
#include "butterfly/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace butterfly;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitOperation = 4;

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string image_root;  // empty: directory of the input manifest

  int input_size = 128;
  std::vector<int> backbone_channels{8, 16, 32};
  int rpn_channels = 32;
  std::vector<double> anchor_scales{32, 64, 128};
  std::vector<double> anchor_ratios{0.5, 1, 2};
  double proposal_nms = 0.7;
  int top_n = 300;

  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  long iters = 100000;
  long lr_step = -1;
  double step_factor = 0.1;
  int rpn_batch = 256;
  double positive_fraction = 0.5;
  int roi_batch = 32;
  double roi_positive_fraction = 0.25;
  double roi_fg_iou = 0.5;
  long log_every = 10;

  double score_threshold = 0.5;
  double nms_threshold = 0.3;
  double iou_threshold = 0.5;
  std::string ap_method = "voc2010";
  int ap_blocks = 10000;
};

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void apply_config_file(const fs::path& path, RunConfig& c) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  maybe(j, "seed", c.seed);
  maybe(j, "threads", c.threads);
  maybe(j, "image_root", c.image_root);
  maybe(j, "input_size", c.input_size);
  maybe(j, "backbone_channels", c.backbone_channels);
  maybe(j, "rpn_channels", c.rpn_channels);
  maybe(j, "anchor_scales", c.anchor_scales);
  maybe(j, "anchor_ratios", c.anchor_ratios);
  maybe(j, "proposal_nms", c.proposal_nms);
  maybe(j, "top_n", c.top_n);
  maybe(j, "lr", c.lr);
  maybe(j, "momentum", c.momentum);
  maybe(j, "weight_decay", c.weight_decay);
  maybe(j, "iters", c.iters);
  maybe(j, "lr_step", c.lr_step);
  maybe(j, "step_factor", c.step_factor);
  maybe(j, "rpn_batch", c.rpn_batch);
  maybe(j, "positive_fraction", c.positive_fraction);
  maybe(j, "roi_batch", c.roi_batch);
  maybe(j, "roi_positive_fraction", c.roi_positive_fraction);
  maybe(j, "roi_fg_iou", c.roi_fg_iou);
  maybe(j, "log_every", c.log_every);
  maybe(j, "score_threshold", c.score_threshold);
  maybe(j, "nms_threshold", c.nms_threshold);
  maybe(j, "iou_threshold", c.iou_threshold);
  maybe(j, "ap_method", c.ap_method);
  maybe(j, "ap_blocks", c.ap_blocks);
}

net::DetectorConfig detector_config(const RunConfig& c) {
  net::DetectorConfig d;
  d.input_size = c.input_size;
  if (c.backbone_channels.size() != 3)
    throw Error("backbone_channels must have exactly 3 entries");
  d.backbone_channels = {c.backbone_channels[0], c.backbone_channels[1],
                         c.backbone_channels[2]};
  d.rpn_channels = c.rpn_channels;
  d.anchor_scales = c.anchor_scales;
  d.anchor_ratios = c.anchor_ratios;
  d.proposal_nms_threshold = c.proposal_nms;
  d.proposal_top_n = c.top_n;
  return d;
}

train::TrainConfig train_config(const RunConfig& c) {
  train::TrainConfig t;
  t.initial_lr = c.lr;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.total_iters = c.iters;
  t.lr_step = c.lr_step;
  t.step_factor = c.step_factor;
  t.rpn_batch = c.rpn_batch;
  t.positive_fraction = c.positive_fraction;
  t.roi_batch = c.roi_batch;
  t.roi_positive_fraction = c.roi_positive_fraction;
  t.roi_fg_iou = c.roi_fg_iou;
  t.log_every = c.log_every;
  t.seed = c.seed;
  return t;
}

fs::path root_for(const RunConfig& c, const fs::path& manifest_path) {
  if (!c.image_root.empty()) return c.image_root;
  auto dir = manifest_path.parent_path();
  return dir.empty() ? fs::path(".") : dir;
}

// Record paths are kept relative to the manifest that lists them, so a
// manifest saved elsewhere gets its paths rebased.
void save_rebased(const data::DatasetManifest& m, const fs::path& from_root,
                  const fs::path& out_path) {
  const fs::path out_dir =
      out_path.parent_path().empty() ? fs::path(".") : out_path.parent_path();
  data::save_manifest(data::rebase_paths(m, from_root, out_dir), out_path);
  std::cout << "wrote " << out_path.string() << "\n";
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-')
      c = '_';
  return out;
}

eval::ApMethod ap_method_of(const RunConfig& c) {
  return c.ap_method == "blocks" ? eval::ApMethod::Blocks
                                 : eval::ApMethod::Voc2010;
}

void write_eval_csv(const eval::EvalReport& report, std::ostream& out) {
  out << "species,ap,precision,recall,tp,fp,fn\n";
  char line[256];
  for (const auto& ce : report.classes) {
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f,%ld,%ld,%ld\n",
                  ce.species.c_str(), ce.ap.ap, ce.op.precision, ce.op.recall,
                  ce.op.counts.tp, ce.op.counts.fp, ce.op.counts.fn);
    out << line;
  }
}

int run(int argc, char** argv) {
  RunConfig cfg;

  // the config file seeds the defaults; flags still win
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string_view(argv[i]) == "--config") {
      try {
        apply_config_file(argv[i + 1], cfg);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
      }
    }
  }

  CLI::App app{"butterfly detection pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");

  std::string manifest_path, eco_path, patterns_path, pred_path, gt_path;
  std::string checkpoint_path, out_path, out_dir, out_train, out_test;
  std::string loss_log_path, strategy = "all", out_manifest;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", cfg.seed, "random seed");
    sub->add_option("--threads", cfg.threads, "worker threads");
    sub->add_option("--image-root", cfg.image_root,
                    "override the manifest-relative image root");
    sub->add_option("--config", config_path, "JSON config file");
  };

  auto* validate = app.add_subcommand("validate", "check a manifest");
  validate->add_option("--manifest", manifest_path)->required();
  add_common(validate);

  auto* stats = app.add_subcommand("stats", "species histogram + long-tail summary");
  stats->add_option("--manifest", manifest_path)->required();
  stats->add_option("--out", out_path, "histogram CSV (default stdout)");
  add_common(stats);

  auto* split = app.add_subcommand("split", "stratified 50/50 split");
  split->add_option("--manifest", manifest_path)->required();
  split->add_option("--out-train", out_train)->capture_default_str();
  split->add_option("--out-test", out_test)->capture_default_str();
  split->add_flag("--drop-singletons", "remove single-image species first");
  add_common(split);

  auto* build = app.add_subcommand("build-trainset", "merge eco train + patterns");
  build->add_option("--eco", eco_path)->required();
  build->add_option("--patterns", patterns_path)->required();
  build->add_option("--strategy", strategy, "all | matched")
      ->check(CLI::IsMember({"all", "matched"}));
  build->add_option("--out", out_path)->required();
  add_common(build);

  auto* augment = app.add_subcommand("augment", "tenfold amplification");
  augment->add_option("--manifest", manifest_path)->required();
  augment->add_option("--out", out_dir, "output directory")->required();
  augment->add_option("--out-manifest", out_manifest,
                      "default <out>/augmented.jsonl");
  add_common(augment);

  auto* train_cmd = app.add_subcommand("train", "train the detector");
  train_cmd->add_option("--manifest", manifest_path)->required();
  train_cmd->add_option("--out-checkpoint", checkpoint_path)->required();
  train_cmd->add_option("--loss-log", loss_log_path, "CSV loss log");
  train_cmd->add_option("--iters", cfg.iters);
  train_cmd->add_option("--lr", cfg.lr);
  train_cmd->add_option("--momentum", cfg.momentum);
  train_cmd->add_option("--weight-decay", cfg.weight_decay);
  train_cmd->add_option("--lr-step", cfg.lr_step);
  train_cmd->add_option("--step-factor", cfg.step_factor);
  train_cmd->add_option("--rpn-batch", cfg.rpn_batch);
  train_cmd->add_option("--positive-fraction", cfg.positive_fraction);
  train_cmd->add_option("--roi-batch", cfg.roi_batch);
  train_cmd->add_option("--roi-positive-fraction", cfg.roi_positive_fraction);
  train_cmd->add_option("--roi-fg-iou", cfg.roi_fg_iou);
  train_cmd->add_option("--log-every", cfg.log_every);
  train_cmd->add_option("--input-size", cfg.input_size);
  train_cmd->add_option("--backbone-channels", cfg.backbone_channels)->expected(3);
  train_cmd->add_option("--rpn-channels", cfg.rpn_channels);
  train_cmd->add_option("--anchor-scales", cfg.anchor_scales);
  train_cmd->add_option("--anchor-ratios", cfg.anchor_ratios);
  train_cmd->add_option("--proposal-nms", cfg.proposal_nms);
  train_cmd->add_option("--top-n", cfg.top_n);
  add_common(train_cmd);

  auto* predict_cmd = app.add_subcommand("predict", "run detection");
  predict_cmd->add_option("--checkpoint", checkpoint_path)->required();
  predict_cmd->add_option("--manifest", manifest_path)->required();
  predict_cmd->add_option("--out", out_path)->required();
  predict_cmd->add_option("--score-threshold", cfg.score_threshold);
  predict_cmd->add_option("--nms-threshold", cfg.nms_threshold);
  add_common(predict_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "mAP evaluation");
  eval_cmd->add_option("--pred", pred_path)->required();
  eval_cmd->add_option("--gt", gt_path)->required();
  eval_cmd->add_option("--out-csv", out_path, "per-class CSV (default stdout)");
  eval_cmd->add_option("--iou-threshold", cfg.iou_threshold);
  eval_cmd->add_option("--ap-method", cfg.ap_method)
      ->check(CLI::IsMember({"voc2010", "blocks"}));
  eval_cmd->add_option("--ap-blocks", cfg.ap_blocks);
  add_common(eval_cmd);

  auto* curve_cmd = app.add_subcommand("pr-curve", "per-class PR curves");
  curve_cmd->add_option("--pred", pred_path)->required();
  curve_cmd->add_option("--gt", gt_path)->required();
  curve_cmd->add_option("--out-dir", out_dir)->required();
  curve_cmd->add_option("--iou-threshold", cfg.iou_threshold);
  add_common(curve_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*validate) {
      const auto m = data::load_manifest(manifest_path);
      std::cout << "OK: " << m.size() << " records, "
                << data::species_set(m).size() << " species\n";
    } else if (*stats) {
      const auto m = data::load_manifest(manifest_path);
      const auto hist = data::species_histogram(m);
      std::ostringstream csv;
      csv << "species,count\n";
      for (const auto& [species, count] : hist.entries)
        csv << species << "," << count << "\n";
      if (out_path.empty()) {
        std::cout << csv.str();
      } else {
        std::ofstream out(out_path);
        if (!out) throw Error("cannot write " + out_path);
        out << csv.str();
        std::cout << "wrote " << out_path << "\n";
      }
      std::vector<int> counts;
      for (const auto& e : hist.entries) counts.push_back(e.second);
      std::sort(counts.begin(), counts.end());
      std::cout << "species: " << counts.size() << ", images: " << m.size()
                << ", per-class min/median/max: " << counts.front() << "/"
                << counts[counts.size() / 2] << "/" << counts.back() << "\n";
    } else if (*split) {
      auto m = data::load_manifest(manifest_path);
      if (split->count("--drop-singletons")) m = data::remove_singletons(m);
      const auto [tr, te] = data::split_stratified(m, cfg.seed);
      const fs::path root = root_for(cfg, manifest_path);
      if (out_train.empty()) out_train = "train.jsonl";
      if (out_test.empty()) out_test = "test.jsonl";
      save_rebased(tr, root, out_train);
      save_rebased(te, root, out_test);
      std::cout << "train " << tr.size() << " / test " << te.size() << "\n";
    } else if (*build) {
      const auto eco = data::load_manifest(eco_path);
      const auto patterns = data::load_manifest(patterns_path);
      const fs::path out_root = fs::path(out_path).parent_path().empty()
                                    ? fs::path(".")
                                    : fs::path(out_path).parent_path();
      const auto eco_r = data::rebase_paths(
          eco, root_for(cfg, eco_path), out_root);
      const auto pat_r = data::rebase_paths(
          patterns, fs::path(patterns_path).parent_path(), out_root);
      const auto merged = data::build_training_set(
          eco_r, pat_r,
          strategy == "all" ? data::TrainsetStrategy::AllPatterns
                            : data::TrainsetStrategy::MatchedPatterns);
      data::save_manifest(merged, out_path);
      std::cout << "wrote " << out_path << "\n";
      std::cout << merged.size() << " records (" << eco.size() << " eco + "
                << merged.size() - eco.size() << " patterns)\n";
    } else if (*augment) {
      const auto m = data::load_manifest(manifest_path);
      const auto out = aug::amplify(m, root_for(cfg, manifest_path), out_dir,
                                    cfg.seed, cfg.threads);
      if (out_manifest.empty())
        out_manifest = (fs::path(out_dir) / "augmented.jsonl").string();
      data::save_manifest(out, out_manifest);
      std::cout << "wrote " << out_manifest << "\n";
      std::cout << out.size() << " records (10x " << m.size() << ")\n";
    } else if (*train_cmd) {
      const auto m = data::load_manifest(manifest_path);
      std::ofstream log;
      if (!loss_log_path.empty()) {
        log.open(loss_log_path);
        if (!log) throw Error("cannot write " + loss_log_path);
      }
      const auto ckpt =
          train::train(m, root_for(cfg, manifest_path), detector_config(cfg),
                       train_config(cfg), log.is_open() ? &log : nullptr);
      train::save_checkpoint(ckpt, checkpoint_path);
      std::cout << "wrote " << checkpoint_path << "\n";
      if (!loss_log_path.empty()) std::cout << "wrote " << loss_log_path << "\n";
    } else if (*predict_cmd) {
      const auto ckpt = train::load_checkpoint(checkpoint_path);
      const auto m = data::load_manifest(manifest_path);
      std::vector<std::string> warnings;
      const auto preds =
          train::predict(ckpt, m, root_for(cfg, manifest_path),
                         cfg.score_threshold, cfg.nms_threshold, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      train::save_predictions(preds, warnings, out_path);
      std::cout << "wrote " << out_path << "\n";
      std::cout << preds.size() << " detections on " << m.size() << " images\n";
    } else if (*eval_cmd) {
      const auto preds = train::load_predictions(pred_path);
      const auto gt = data::load_manifest(gt_path);
      const auto report = eval::evaluate(preds, gt, cfg.iou_threshold,
                                         ap_method_of(cfg), cfg.ap_blocks);
      if (out_path.empty()) {
        write_eval_csv(report, std::cout);
      } else {
        std::ofstream out(out_path);
        if (!out) throw Error("cannot write " + out_path);
        write_eval_csv(report, out);
        std::cout << "wrote " << out_path << "\n";
      }
      char line[128];
      std::snprintf(line, sizeof(line), "mAP %.6f (%s, %zu classes)\n",
                    report.map, cfg.ap_method.c_str(), report.classes.size());
      std::cout << line;
    } else if (*curve_cmd) {
      const auto preds = train::load_predictions(pred_path);
      const auto gt = data::load_manifest(gt_path);
      const auto report = eval::evaluate(preds, gt, cfg.iou_threshold,
                                         eval::ApMethod::Voc2010, cfg.ap_blocks);
      fs::create_directories(out_dir);
      for (const auto& ce : report.classes) {
        const fs::path file = fs::path(out_dir) / (sanitize(ce.species) + ".csv");
        std::ofstream out(file);
        if (!out) throw Error("cannot write " + file.string());
        out << "recall,precision\n";
        char line[80];
        for (const auto& p : ce.curve.points) {
          std::snprintf(line, sizeof(line), "%.6f,%.6f\n", p.recall, p.precision);
          out << line;
        }
        std::cout << "wrote " << file.string() << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOperation;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
