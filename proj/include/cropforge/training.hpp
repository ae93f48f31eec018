#pragma once

// Set-prediction training: Hungarian matching of predictions to
// high-quality ground truth, smooth-L1 + GIoU box losses, score targets
// with IoU >= 0.9 label smoothing, mosaic sampling, and the epoch loop.

#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cropforge/adamw.hpp"
#include "cropforge/box.hpp"
#include "cropforge/dataset.hpp"
#include "cropforge/decoder.hpp"
#include "cropforge/querying.hpp"

namespace cropforge {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, gt)
  std::vector<std::size_t> unmatched_pred_indices;
  double total_cost = 0;
};

// Minimum-total-cost assignment of min(R,C) pairs. Throws on an empty or
// non-finite cost matrix.
MatchResult hungarian(const std::vector<std::vector<double>>& cost);

// C[m][j] = l1_w * ||b_m - g_j||_1 (cxcywh) + giou_w * (1 - GIoU(b_m, g_j))
std::vector<std::vector<double>> build_cost(const std::vector<Box>& pred,
                                            const std::vector<Box>& gt,
                                            double l1_w, double giou_w);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double lambda_score = 1.0;
  std::uint64_t seed = 7;
  bool mosaic_enabled = true;
  QueryMode query_mode = QueryMode::Both;
  double smoothing_iou_threshold = 0.9;
  double hq_score_threshold = 4.0;
  double grad_clip = 1.0;
  double smooth_l1_beta = 1.0;
  bool flip_augment = true;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Returns every violated constraint; empty means valid.
  std::vector<std::string> validation_errors() const;
};

struct LossBreakdown {
  ag::Tensor total_tensor;  // differentiable composition of the terms below
  double l1_box = 0, giou_box = 0, score = 0, total = 0;
  std::size_t matched = 0, smoothed = 0, background = 0;
};

// gt carries the FULL annotated proposal set (all scores). Matching runs
// against the subset with score >= hq_score_threshold; score targets use
// the full set for label smoothing. Throws when no high-quality GT exists.
LossBreakdown set_loss(const DecoderOutput& out,
                       const std::vector<ScoredBox>& gt,
                       const TrainConfig& cfg);

struct MosaicSample {
  SceneSpec scene;  // composite
  std::string text;
  std::vector<ScoredBox> gt;  // target sample's boxes in global coordinates
  MosaicLayout layout;
};

// grid in {1,2,3} with equal probability; grid^2 distinct samples; one
// uniformly chosen target cell supplies text and ground truth.
MosaicSample sample_mosaic(const std::vector<AnnotatedSample>& dataset,
                           std::mt19937_64& rng);

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                 double lr_min);

// Horizontal flip of a scene and box list (flipping is semantic for the
// synthetic encoder; photometric jitter would be a no-op and is skipped).
SceneSpec flip_scene(const SceneSpec& scene);
Box flip_box(const Box& b);

struct TrainResult {
  DecoderModel model;
  ag::AdamWState opt_state;
  std::vector<nlohmann::json> epoch_logs;  // one JSON object per epoch
};

// Deterministic given cfg.seed. probe_set (annotator schema) drives the
// per-epoch held-out IoU-Max probe and may be empty. Pass resume/resume_opt
// to continue a run; start_epoch keeps epoch numbering monotonic.
TrainResult train(const std::vector<AnnotatedSample>& train_set,
                  const std::vector<AnnotatedSample>& probe_set,
                  const ConceptVocabulary& vocab,
                  const EncoderParams& enc_params,
                  const std::set<std::string>& lexicon,
                  const DecoderConfig& dec_cfg, const TrainConfig& cfg,
                  const DecoderModel* resume = nullptr,
                  const ag::AdamWState* resume_opt = nullptr,
                  int start_epoch = 0,
                  const std::function<void(const nlohmann::json&)>& on_epoch =
                      nullptr);

}  // namespace cropforge
