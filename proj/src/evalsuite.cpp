#include "cropforge/evalsuite.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace cropforge {

std::pair<double, double> iou_mean_max(
    const Box& pred, const std::vector<Box>& annotator_boxes) {
  if (annotator_boxes.empty())
    throw EvalError("iou_mean_max: empty annotator box list");
  double sum = 0, best = 0;
  for (const auto& g : annotator_boxes) {
    double i = iou(pred, g);
    sum += i;
    best = std::max(best, i);
  }
  return {sum / static_cast<double>(annotator_boxes.size()), best};
}

int acc_k_n(const std::vector<Box>& pred_topk,
            const std::vector<ScoredBox>& dense_gt, std::size_t K,
            std::size_t N) {
  if (pred_topk.size() != K)
    throw EvalError("acc_k_n: expected " + std::to_string(K) +
                    " predictions, got " + std::to_string(pred_topk.size()));
  if (dense_gt.size() < N)
    throw EvalError("acc_k_n: need at least " + std::to_string(N) +
                    " proposals, got " + std::to_string(dense_gt.size()));

  // Indices of the N highest-scored proposals (score ties -> lowest index).
  std::vector<std::size_t> order(dense_gt.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return dense_gt[a].score > dense_gt[b].score;
  });
  std::vector<char> top(dense_gt.size(), 0);
  for (std::size_t r = 0; r < N; ++r) top[order[r]] = 1;

  for (const auto& p : pred_topk) {
    double best_iou = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < dense_gt.size(); ++j) {
      double i = iou(p, dense_gt[j].box);
      if (i > best_iou) {
        best_iou = i;
        best_j = j;
      }
    }
    if (top[best_j]) return 1;
  }
  return 0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : r.boxes) boxes.push_back(box_to_json(b));
    nlohmann::json rec = {{"id", r.id},
                          {"text_index", r.text_index},
                          {"boxes", boxes},
                          {"scores", r.scores}};
    if (r.iou_mean) rec["iou_mean"] = *r.iou_mean;
    if (r.iou_max) rec["iou_max"] = *r.iou_max;
    for (const auto& [n, hit] : r.acc_hits)
      rec["acc_1_" + std::to_string(n)] = hit;
    recs.push_back(rec);
  }
  return {{"config", config}, {"records", recs}, {"aggregates", aggregates}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "metric,value\n";
  out.precision(17);
  for (const auto& [k, v] : aggregates) out << k << "," << v << "\n";
  return out.str();
}

namespace {

void check_schema(const DatasetManifest& manifest, const EvalOptions& opts) {
  if (opts.want_acc && manifest.schema != SchemaKind::DenseScored)
    throw EvalError("ACC metrics require the dense-scored schema, but the "
                    "manifest uses " +
                    schema_name(manifest.schema));
  if (opts.want_iou && manifest.schema != SchemaKind::AnnotatorBoxes)
    throw EvalError("IoU metrics require the annotator-boxes schema, but the "
                    "manifest uses " +
                    schema_name(manifest.schema));
  if (!opts.want_iou && !opts.want_acc)
    throw EvalError("no metrics requested");
}

// Metrics plus aggregation for one evaluation unit.
void score_unit(EvalRecord& rec, const AnnotatedSample& s, std::size_t t,
                const EvalOptions& opts,
                std::map<std::string, std::pair<double, std::size_t>>& acc) {
  auto bump = [&acc](const std::string& k, double v) {
    auto& slot = acc[k];
    slot.first += v;
    slot.second += 1;
  };
  if (opts.want_iou) {
    if (rec.boxes.empty()) throw EvalError("empty prediction for " + rec.id);
    auto [m, x] = iou_mean_max(rec.boxes[0], s.annotator_gt[t]);
    rec.iou_mean = m;
    rec.iou_max = x;
    bump("IoU-Mean", m);
    bump("IoU-Max", x);
  }
  if (opts.want_acc) {
    std::vector<Box> topk(rec.boxes.begin(),
                          rec.boxes.begin() +
                              static_cast<long>(std::min(opts.acc_k,
                                                         rec.boxes.size())));
    for (std::size_t n : opts.acc_ns) {
      int hit = acc_k_n(topk, s.dense_gt[t], opts.acc_k, n);
      rec.acc_hits[n] = hit;
      bump("ACC_" + std::to_string(opts.acc_k) + "_" + std::to_string(n),
           hit);
    }
  }
}

EvalReport finish(std::vector<EvalRecord> records,
                  std::map<std::string, std::pair<double, std::size_t>> acc,
                  nlohmann::json config) {
  EvalReport rep;
  rep.records = std::move(records);
  rep.config = std::move(config);
  for (const auto& [k, slot] : acc)
    rep.aggregates[k] =
        slot.second ? slot.first / static_cast<double>(slot.second) : 0.0;
  return rep;
}

}  // namespace

EvalReport evaluate_model(const DecoderModel& model,
                          const DatasetManifest& manifest,
                          const EvalOptions& opts) {
  check_schema(manifest, opts);
  auto vocab = vocabulary_from_manifest(manifest);
  auto enc_params = encoder_params_from_manifest(manifest);
  std::set<std::string> lexicon(vocab.concepts().begin(),
                                vocab.concepts().end());
  std::size_t top_k = std::max<std::size_t>(opts.want_acc ? opts.acc_k : 1, 1);

  std::vector<EvalRecord> records;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& file : manifest.sample_files) {
    auto s = load_sample(manifest, file);
    auto enc = encode_image(s.scene, vocab, enc_params);
    for (std::size_t t = 0; t < s.texts.size(); ++t) {
      QuerySet qs;
      if (opts.query_mode != QueryMode::None)
        qs = build_text_queries(opts.query_mode, s.texts[t], lexicon, vocab);
      auto preds = predict(model, enc, qs, top_k);
      EvalRecord rec;
      rec.id = s.id;
      rec.text_index = t;
      for (const auto& p : preds) {
        rec.boxes.push_back(p.box);
        rec.scores.push_back(p.score);
      }
      score_unit(rec, s, t, opts, acc);
      records.push_back(std::move(rec));
    }
  }
  nlohmann::json config = {{"mode", "model"},
                           {"query_mode", query_mode_name(opts.query_mode)},
                           {"schema", schema_name(manifest.schema)},
                           {"split", manifest.split}};
  return finish(std::move(records), std::move(acc), std::move(config));
}

EvalReport evaluate_predictions(const nlohmann::json& predictions,
                                const DatasetManifest& manifest,
                                const EvalOptions& opts) {
  check_schema(manifest, opts);
  if (!predictions.is_array())
    throw EvalError("prediction file must be a JSON array");
  // (id, text_index) -> entry
  std::map<std::pair<std::string, std::size_t>, const nlohmann::json*> index;
  for (const auto& e : predictions) {
    auto key = std::make_pair(e.at("id").get<std::string>(),
                              e.value("text_index", std::size_t{0}));
    if (!index.emplace(key, &e).second)
      throw EvalError("duplicate prediction for " + key.first + " text " +
                      std::to_string(key.second));
  }

  std::vector<EvalRecord> records;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& file : manifest.sample_files) {
    auto s = load_sample(manifest, file);
    for (std::size_t t = 0; t < s.texts.size(); ++t) {
      auto it = index.find({s.id, t});
      if (it == index.end())
        throw EvalError("missing prediction for " + s.id + " text " +
                        std::to_string(t));
      const auto& e = *it->second;
      EvalRecord rec;
      rec.id = s.id;
      rec.text_index = t;
      for (const auto& b : e.at("boxes")) rec.boxes.push_back(box_from_json(b));
      if (e.contains("scores"))
        rec.scores = e.at("scores").get<std::vector<double>>();
      score_unit(rec, s, t, opts, acc);
      records.push_back(std::move(rec));
    }
  }
  nlohmann::json config = {{"mode", "predictions"},
                           {"schema", schema_name(manifest.schema)},
                           {"split", manifest.split}};
  return finish(std::move(records), std::move(acc), std::move(config));
}

}  // namespace cropforge
