#pragma once

// Conditioned-cropping metrics: IoU-Mean / IoU-Max against per-annotator
// boxes, and ACC_{K/N} against densely scored proposals (free boxes are
// mapped to the highest-IoU proposal; index breaks ties). Reports are
// deterministic JSON with an optional CSV of the aggregates.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cropforge/box.hpp"
#include "cropforge/dataset.hpp"
#include "cropforge/decoder.hpp"
#include "cropforge/querying.hpp"

namespace cropforge {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// (mean, max) of IoU(pred, a) over annotator boxes. Throws on an empty list.
std::pair<double, double> iou_mean_max(const Box& pred,
                                       const std::vector<Box>& annotator_boxes);

// 1 iff any of the K predictions maps (highest IoU, ties -> lowest proposal
// index) onto one of the N best-scored proposals (score ties -> lowest
// index). Throws when |dense_gt| < N or |pred_topk| != K.
int acc_k_n(const std::vector<Box>& pred_topk,
            const std::vector<ScoredBox>& dense_gt, std::size_t K,
            std::size_t N);

struct EvalRecord {
  std::string id;
  std::size_t text_index = 0;
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::optional<double> iou_mean, iou_max;
  std::map<std::size_t, int> acc_hits;  // N -> 0/1
};

struct EvalReport {
  std::vector<EvalRecord> records;  // one per (sample, text) unit
  std::map<std::string, double> aggregates;
  nlohmann::json config;  // echo of the evaluation setup

  nlohmann::json to_json() const;
  std::string to_csv() const;  // aggregates only
};

struct EvalOptions {
  bool want_iou = false;
  bool want_acc = false;
  QueryMode query_mode = QueryMode::Both;
  std::size_t acc_k = 1;
  std::vector<std::size_t> acc_ns{5, 10};
};

EvalReport evaluate_model(const DecoderModel& model,
                          const DatasetManifest& manifest,
                          const EvalOptions& opts);

// predictions: JSON array [{id, text_index, boxes: [[cx,cy,w,h]...],
// scores: [...]}] covering every evaluation unit of the manifest.
EvalReport evaluate_predictions(const nlohmann::json& predictions,
                                const DatasetManifest& manifest,
                                const EvalOptions& opts);

}  // namespace cropforge
