#include "cropforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cropforge/rng.hpp"

namespace cropforge {

using ag::Tensor;

MatchResult hungarian(const std::vector<std::vector<double>>& cost) {
  if (cost.empty() || cost[0].empty())
    throw TrainError("hungarian: empty cost matrix");
  std::size_t rows = cost.size(), cols = cost[0].size();
  for (const auto& r : cost) {
    if (r.size() != cols) throw TrainError("hungarian: ragged cost matrix");
    for (double c : r)
      if (!std::isfinite(c)) throw TrainError("hungarian: non-finite cost");
  }
  bool transposed = rows > cols;
  std::size_t n = transposed ? cols : rows;  // n <= m
  std::size_t m = transposed ? rows : cols;
  auto at = [&](std::size_t i, std::size_t j) {
    return transposed ? cost[j][i] : cost[i][j];
  };

  // Jonker-Volgenant style shortest augmenting paths with potentials.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= m; ++j)
        if (!used[j]) {
          double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (std::size_t j = 0; j <= m; ++j)
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  MatchResult res;
  std::vector<char> pred_used(rows, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    std::size_t row = p[j] - 1, col = j - 1;  // in the (possibly) transposed frame
    std::size_t pred = transposed ? col : row;
    std::size_t gt = transposed ? row : col;
    res.pairs.emplace_back(pred, gt);
    res.total_cost += cost[pred][gt];
    pred_used[pred] = 1;
  }
  std::sort(res.pairs.begin(), res.pairs.end());
  for (std::size_t i = 0; i < rows; ++i)
    if (!pred_used[i]) res.unmatched_pred_indices.push_back(i);
  return res;
}

std::vector<std::vector<double>> build_cost(const std::vector<Box>& pred,
                                            const std::vector<Box>& gt,
                                            double l1_w, double giou_w) {
  if (gt.empty()) throw TrainError("build_cost: empty ground truth");
  std::vector<std::vector<double>> cost(pred.size(),
                                        std::vector<double>(gt.size()));
  for (std::size_t m = 0; m < pred.size(); ++m)
    for (std::size_t j = 0; j < gt.size(); ++j) {
      double l1 = std::abs(pred[m].cx - gt[j].cx) +
                  std::abs(pred[m].cy - gt[j].cy) +
                  std::abs(pred[m].w - gt[j].w) +
                  std::abs(pred[m].h - gt[j].h);
      cost[m][j] = l1_w * l1 + giou_w * (1.0 - giou(pred[m], gt[j]));
    }
  return cost;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr_max", lr_max},
          {"lr_min", lr_min},
          {"weight_decay", weight_decay},
          {"lambda_l1", lambda_l1},
          {"lambda_giou", lambda_giou},
          {"lambda_score", lambda_score},
          {"seed", seed},
          {"mosaic_enabled", mosaic_enabled},
          {"query_mode", query_mode_name(query_mode)},
          {"smoothing_iou_threshold", smoothing_iou_threshold},
          {"hq_score_threshold", hq_score_threshold},
          {"grad_clip", grad_clip},
          {"smooth_l1_beta", smooth_l1_beta},
          {"flip_augment", flip_augment}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lambda_l1 = j.value("lambda_l1", c.lambda_l1);
  c.lambda_giou = j.value("lambda_giou", c.lambda_giou);
  c.lambda_score = j.value("lambda_score", c.lambda_score);
  c.seed = j.value("seed", c.seed);
  c.mosaic_enabled = j.value("mosaic_enabled", c.mosaic_enabled);
  if (j.contains("query_mode"))
    c.query_mode = parse_query_mode(j.at("query_mode").get<std::string>());
  c.smoothing_iou_threshold =
      j.value("smoothing_iou_threshold", c.smoothing_iou_threshold);
  c.hq_score_threshold = j.value("hq_score_threshold", c.hq_score_threshold);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.smooth_l1_beta = j.value("smooth_l1_beta", c.smooth_l1_beta);
  c.flip_augment = j.value("flip_augment", c.flip_augment);
  return c;
}

std::vector<std::string> TrainConfig::validation_errors() const {
  std::vector<std::string> errs;
  if (epochs < 0) errs.push_back("epochs must be >= 0");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (!(lr_max >= lr_min) || lr_min <= 0)
    errs.push_back("learning rates must satisfy lr_max >= lr_min > 0");
  if (weight_decay < 0) errs.push_back("weight_decay must be >= 0");
  if (lambda_l1 < 0 || lambda_giou < 0 || lambda_score < 0)
    errs.push_back("loss weights must be >= 0");
  if (smoothing_iou_threshold < 0 || smoothing_iou_threshold > 1)
    errs.push_back("smoothing_iou_threshold must be in [0,1]");
  if (hq_score_threshold < 1 || hq_score_threshold > 5)
    errs.push_back("hq_score_threshold must be in [1,5]");
  if (grad_clip <= 0) errs.push_back("grad_clip must be > 0");
  if (smooth_l1_beta <= 0) errs.push_back("smooth_l1_beta must be > 0");
  return errs;
}

namespace {

Tensor const1(double v) { return Tensor::leaf({1}, {v}); }

// Differentiable clamped prediction for query m: corner-clamped into
// [0,1]^2 with the same 1e-4 size floor as clamp_box.
struct PredBoxT {
  Tensor cx, cy, w, h, x1, y1, x2, y2;
};

PredBoxT pred_box_tensor(const DecoderOutput& out, std::size_t m) {
  const Box& bu = out.union_box;
  Tensor row = ag::index_select(out.offsets, 0, {m});  // [1,4]
  auto coord = [&row](std::size_t c) {
    return ag::reshape(ag::index_select(row, 1, {c}), {1});
  };
  Tensor cx = ag::add_scalar(coord(0), bu.cx);
  Tensor cy = ag::add_scalar(coord(1), bu.cy);
  Tensor w = ag::add_scalar(coord(2), bu.w);
  Tensor h = ag::add_scalar(coord(3), bu.h);
  Tensor zero = const1(0.0), one = const1(1.0), floor = const1(1e-4);
  auto clamp01 = [&](const Tensor& t) {
    return ag::minimum(ag::maximum(t, zero), one);
  };
  PredBoxT p;
  p.x1 = clamp01(ag::sub(cx, ag::scalar_mul(w, 0.5)));
  p.x2 = clamp01(ag::add(cx, ag::scalar_mul(w, 0.5)));
  p.y1 = clamp01(ag::sub(cy, ag::scalar_mul(h, 0.5)));
  p.y2 = clamp01(ag::add(cy, ag::scalar_mul(h, 0.5)));
  p.w = ag::maximum(ag::sub(p.x2, p.x1), floor);
  p.h = ag::maximum(ag::sub(p.y2, p.y1), floor);
  p.cx = ag::scalar_mul(ag::add(p.x1, p.x2), 0.5);
  p.cy = ag::scalar_mul(ag::add(p.y1, p.y2), 0.5);
  return p;
}

Tensor giou_term(const PredBoxT& p, const Box& g) {
  Tensor zero = const1(0.0);
  Tensor gx1 = const1(g.x1()), gx2 = const1(g.x2());
  Tensor gy1 = const1(g.y1()), gy2 = const1(g.y2());
  Tensor iw = ag::maximum(
      ag::sub(ag::minimum(p.x2, gx2), ag::maximum(p.x1, gx1)), zero);
  Tensor ih = ag::maximum(
      ag::sub(ag::minimum(p.y2, gy2), ag::maximum(p.y1, gy1)), zero);
  Tensor inter = ag::mul(iw, ih);
  Tensor area = ag::mul(p.w, p.h);
  Tensor uni = ag::sub(ag::add_scalar(area, g.area()), inter);
  Tensor iou_t = ag::div(inter, uni);
  Tensor hw = ag::sub(ag::maximum(p.x2, gx2), ag::minimum(p.x1, gx1));
  Tensor hh = ag::sub(ag::maximum(p.y2, gy2), ag::minimum(p.y1, gy1));
  Tensor hull = ag::mul(hw, hh);
  Tensor giou_t = ag::sub(iou_t, ag::div(ag::sub(hull, uni), hull));
  return ag::sub(const1(1.0), giou_t);  // loss = 1 - GIoU
}

}  // namespace

LossBreakdown set_loss(const DecoderOutput& out,
                       const std::vector<ScoredBox>& gt,
                       const TrainConfig& cfg) {
  std::size_t m_count = out.pred_boxes.size();
  std::vector<std::size_t> hq;  // indices into gt
  for (std::size_t j = 0; j < gt.size(); ++j)
    if (gt[j].score >= cfg.hq_score_threshold) hq.push_back(j);
  if (hq.empty())
    throw TrainError("set_loss: sample must be pre-filtered (no ground truth "
                     "with score >= " +
                     std::to_string(cfg.hq_score_threshold) + ")");

  std::vector<Box> hq_boxes;
  for (auto j : hq) hq_boxes.push_back(gt[j].box);
  auto cost =
      build_cost(out.pred_boxes, hq_boxes, cfg.lambda_l1, cfg.lambda_giou);
  MatchResult match = hungarian(cost);

  LossBreakdown lb;
  std::vector<Tensor> l1_terms, giou_terms;
  std::vector<long> matched_gt(m_count, -1);  // full-set gt index per pred
  for (const auto& [pm, hj] : match.pairs) {
    std::size_t gj = hq[hj];
    matched_gt[pm] = static_cast<long>(gj);
    PredBoxT p = pred_box_tensor(out, pm);
    const Box& g = gt[gj].box;
    Tensor pred4 = ag::concat({p.cx, p.cy, p.w, p.h}, 0);  // [4]
    Tensor gt4 = Tensor::leaf({4}, {g.cx, g.cy, g.w, g.h});
    l1_terms.push_back(ag::reshape(
        ag::sum_all(ag::smooth_l1(pred4, gt4, cfg.smooth_l1_beta)), {1}));
    giou_terms.push_back(giou_term(p, g));
  }
  Tensor l1_box = ag::mean(ag::concat(l1_terms, 0), 0);
  Tensor giou_box = ag::mean(ag::concat(giou_terms, 0), 0);

  // Score targets: (a) matched -> matched GT score / 5; (b) IoU >= threshold
  // against any annotated box -> that score / 5; (c) else 0 at weight 0.1.
  std::vector<double> targets(m_count, 0.0), weights(m_count, 0.1);
  for (std::size_t m = 0; m < m_count; ++m) {
    if (matched_gt[m] >= 0) {
      targets[m] = gt[static_cast<std::size_t>(matched_gt[m])].score / 5.0;
      weights[m] = 1.0;
      ++lb.matched;
      continue;
    }
    double best_iou = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      double i = iou(out.pred_boxes[m], gt[j].box);
      if (i > best_iou) {
        best_iou = i;
        best_j = j;
      }
    }
    if (best_iou >= cfg.smoothing_iou_threshold) {
      targets[m] = gt[best_j].score / 5.0;
      weights[m] = 1.0;
      ++lb.smoothed;
    } else {
      ++lb.background;
    }
  }
  double weight_sum = 0;
  for (double w : weights) weight_sum += w;
  Tensor target_t = Tensor::leaf({m_count}, targets);
  Tensor weight_t = Tensor::leaf({m_count}, weights);
  Tensor score_term = ag::scalar_mul(
      ag::sum_all(ag::mul(ag::smooth_l1(out.scores, target_t,
                                        cfg.smooth_l1_beta),
                          weight_t)),
      1.0 / weight_sum);

  lb.total_tensor =
      ag::add(ag::add(ag::scalar_mul(l1_box, cfg.lambda_l1),
                      ag::scalar_mul(giou_box, cfg.lambda_giou)),
              ag::scalar_mul(score_term, cfg.lambda_score));
  lb.l1_box = l1_box.item();
  lb.giou_box = giou_box.item();
  lb.score = score_term.item();
  lb.total = lb.total_tensor.item();
  return lb;
}

MosaicSample sample_mosaic(const std::vector<AnnotatedSample>& dataset,
                           std::mt19937_64& rng) {
  if (dataset.empty()) throw TrainError("sample_mosaic: empty dataset");
  std::uniform_int_distribution<int> gdist(1, 3);
  int grid = gdist(rng);
  std::size_t need = static_cast<std::size_t>(grid) * grid;
  if (dataset.size() < need)
    throw TrainError("sample_mosaic: dataset smaller than " +
                     std::to_string(need) + " samples for grid " +
                     std::to_string(grid));
  std::vector<std::size_t> pool(dataset.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t k = 0; k < need; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  std::uniform_int_distribution<int> cdist(0, grid * grid - 1);
  int cell = cdist(rng);
  MosaicLayout layout(grid, cell / grid, cell % grid);

  std::vector<SceneSpec> scenes;
  for (std::size_t k = 0; k < need; ++k) scenes.push_back(dataset[pool[k]].scene);
  MosaicSample out;
  out.layout = layout;
  out.scene = compose_scenes(scenes, layout);
  const auto& target =
      dataset[pool[static_cast<std::size_t>(cell)]];
  if (target.schema != SchemaKind::DenseScored || target.dense_gt.empty())
    throw TrainError("sample_mosaic: training requires dense-scored samples");
  out.text = target.texts[0];
  for (const auto& sb : target.dense_gt[0])
    out.gt.push_back(
        {layout.to_global(layout.target_row, layout.target_col, sb.box),
         sb.score});
  return out;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max,
                 double lr_min) {
  if (total_steps <= 0) throw TrainError("cosine_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw TrainError("cosine_lr: step out of [0, total_steps]");
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

Box flip_box(const Box& b) { return Box{1.0 - b.cx, b.cy, b.w, b.h}; }

SceneSpec flip_scene(const SceneSpec& scene) {
  SceneSpec out = scene;
  for (auto& obj : out.objects) obj.box = flip_box(obj.box);
  return out;
}

namespace {

double probe_iou_max(const DecoderModel& model,
                     const std::vector<AnnotatedSample>& probe_set,
                     const ConceptVocabulary& vocab,
                     const EncoderParams& enc_params,
                     const std::set<std::string>& lexicon, QueryMode mode) {
  double sum = 0;
  std::size_t units = 0;
  for (const auto& s : probe_set) {
    auto enc = encode_image(s.scene, vocab, enc_params);
    for (std::size_t t = 0; t < s.texts.size(); ++t) {
      QuerySet qs;
      if (mode != QueryMode::None)
        qs = build_text_queries(mode, s.texts[t], lexicon, vocab);
      auto preds = predict(model, enc, qs, 1);
      double best = 0;
      for (const auto& gb : s.annotator_gt[t])
        best = std::max(best, iou(preds[0].box, gb));
      sum += best;
      ++units;
    }
  }
  return units ? sum / static_cast<double>(units) : 0.0;
}

}  // namespace

TrainResult train(const std::vector<AnnotatedSample>& train_set,
                  const std::vector<AnnotatedSample>& probe_set,
                  const ConceptVocabulary& vocab,
                  const EncoderParams& enc_params,
                  const std::set<std::string>& lexicon,
                  const DecoderConfig& dec_cfg, const TrainConfig& cfg,
                  const DecoderModel* resume,
                  const ag::AdamWState* resume_opt, int start_epoch,
                  const std::function<void(const nlohmann::json&)>& on_epoch) {
  auto errs = cfg.validation_errors();
  if (!errs.empty()) {
    std::string msg = "train: invalid config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw TrainError(msg);
  }
  if (train_set.empty()) throw TrainError("train: empty training set");

  TrainResult res{resume ? *resume : DecoderModel(dec_cfg, cfg.seed),
                  resume_opt ? *resume_opt : ag::AdamWState{},
                  {}};
  DecoderModel& model = res.model;
  if (model.config() != dec_cfg)
    throw TrainError("train: resumed checkpoint config mismatch");

  auto rng = make_rng(cfg.seed, "train-loop:" + std::to_string(start_epoch));
  std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_set.size()) + cfg.batch_size - 1) /
      cfg.batch_size;
  std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) *
                             steps_per_epoch;
  std::int64_t global_step = static_cast<std::int64_t>(start_epoch) *
                             steps_per_epoch;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> sample_pick(0,
                                                         train_set.size() - 1);

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    double e_l1 = 0, e_giou = 0, e_score = 0, e_total = 0, last_lr = 0;
    std::int64_t loss_count = 0, fallback_count = 0, skipped = 0;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      double lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.lr_min);
      last_lr = lr;
      ag::zero_grads(model.params());
      for (int b = 0; b < cfg.batch_size; ++b) {
        MosaicSample ms;
        if (cfg.mosaic_enabled) {
          ms = sample_mosaic(train_set, rng);
        } else {
          const auto& s = train_set[sample_pick(rng)];
          ms.layout = MosaicLayout(1, 0, 0);
          ms.scene = s.scene;
          ms.text = s.texts[0];
          ms.gt = s.dense_gt[0];
        }
        if (cfg.flip_augment && coin(rng) < 0.5) {
          ms.scene = flip_scene(ms.scene);
          for (auto& sb : ms.gt) sb.box = flip_box(sb.box);
        }
        bool has_hq = false;
        for (const auto& sb : ms.gt)
          if (sb.score >= cfg.hq_score_threshold) has_hq = true;
        if (!has_hq) {
          ++skipped;
          continue;
        }

        auto enc = encode_image(ms.scene, vocab, enc_params);
        Selection sel;
        Box union_b;
        bool have_sel = false;
        if (cfg.query_mode != QueryMode::None) {
          QuerySet qs =
              build_text_queries(cfg.query_mode, ms.text, lexicon, vocab);
          sel = match(qs, enc);
          if (cfg.mosaic_enabled) {
            const ScoredBox* best = &ms.gt[0];
            for (const auto& sb : ms.gt)
              if (sb.score > best->score) best = &sb;
            sel = filter_training_selection(sel, best->box,
                                            ms.layout.target_region(), enc);
            if (sel.used_fallback) ++fallback_count;
          }
          union_b = union_box(sel.boxes);
          have_sel = true;
        } else {
          union_b = full_canvas_box();
        }
        Tensor q = model.build_query(have_sel ? &sel : nullptr);
        DecoderOutput out;
        try {
          out = model.decode(q, tokens_as_tensor(enc),
                             pos_codes_as_tensor(enc), union_b);
          LossBreakdown lb = set_loss(out, ms.gt, cfg);
          Tensor scaled = ag::scalar_mul(
              lb.total_tensor, 1.0 / static_cast<double>(cfg.batch_size));
          ag::backward(scaled);
          e_l1 += lb.l1_box;
          e_giou += lb.giou_box;
          e_score += lb.score;
          e_total += lb.total;
          ++loss_count;
        } catch (const ag::TensorError& e) {
          throw TrainError("train: epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + ": " + e.what());
        }
      }
      ag::clip_grad_norm(model.params(), cfg.grad_clip);
      ag::AdamWConfig ocfg;
      ocfg.lr = lr;
      ocfg.weight_decay = cfg.weight_decay;
      ag::adamw_step(model.params(), res.opt_state, ocfg);
      ++global_step;
    }
    double inv = loss_count ? 1.0 / static_cast<double>(loss_count) : 0.0;
    nlohmann::json log = {
        {"epoch", epoch},
        {"lr", last_lr},
        {"l1_box", e_l1 * inv},
        {"giou_box", e_giou * inv},
        {"score", e_score * inv},
        {"total", e_total * inv},
        {"probe_iou_max",
         probe_set.empty()
             ? nlohmann::json(nullptr)
             : nlohmann::json(probe_iou_max(model, probe_set, vocab,
                                            enc_params, lexicon,
                                            cfg.query_mode))},
        {"fallback_filter_count", fallback_count},
        {"skipped_samples", skipped}};
    res.epoch_logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return res;
}

}  // namespace cropforge
