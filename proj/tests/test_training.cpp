#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "cropforge/rng.hpp"
#include "cropforge/training.hpp"

using namespace cropforge;
using ag::Tensor;

namespace {

const std::vector<std::string> kConcepts = {"woman", "dog", "boat", "plate",
                                            "tree"};

// Exhaustive minimum assignment cost for small matrices.
double brute_force_cost(const std::vector<std::vector<double>>& c) {
  std::size_t rows = c.size(), cols = c[0].size();
  bool transposed = rows > cols;
  std::size_t r = std::min(rows, cols), n = std::max(rows, cols);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0;
    for (std::size_t i = 0; i < r; ++i)
      total += transposed ? c[perm[i]][i] : c[i][perm[i]];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Builds a DecoderOutput by hand; offsets are chosen so the differentiable
// reconstruction in set_loss reproduces exactly these boxes.
DecoderOutput make_output(const Box& union_b, const std::vector<Box>& boxes,
                          const std::vector<double>& scores) {
  DecoderOutput out;
  out.union_box = union_b;
  out.pred_boxes = boxes;
  std::vector<double> off;
  for (const auto& b : boxes) {
    off.push_back(b.cx - union_b.cx);
    off.push_back(b.cy - union_b.cy);
    off.push_back(b.w - union_b.w);
    off.push_back(b.h - union_b.h);
  }
  out.offsets = Tensor::leaf({boxes.size(), 4}, off, true);
  out.scores = Tensor::leaf({scores.size()}, scores, true);
  return out;
}

std::vector<AnnotatedSample> tiny_dataset(std::size_t n, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() /
                 ("cropforge-train-test-" + std::to_string(seed));
  fs::remove_all(dir);
  fs::create_directories(dir);
  GeneratorParams gp;
  auto split =
      generate_synthetic(dir.string(), "t", n, kConcepts, seed, gp, true,
                         false);
  return load_all_samples(*split.dense);
}

DecoderConfig desk_config() {
  DecoderConfig c;
  c.num_queries = 16;
  c.model_dim = 64;
  c.num_layers = 2;
  return c;
}

}  // namespace

TEST_CASE("hungarian hand fixtures") {
  auto r = hungarian({{1, 2}, {2, 4}});
  CHECK(r.total_cost == doctest::Approx(4.0).epsilon(1e-12));
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0] == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(r.pairs[1] == std::pair<std::size_t, std::size_t>{1, 0});
  CHECK(r.unmatched_pred_indices.empty());

  auto diag = hungarian({{0, 9, 9}, {9, 0, 9}, {9, 9, 0}});
  CHECK(diag.total_cost == 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(diag.pairs[i].second == i);

  // Wide: one row picks its cheapest column.
  auto wide = hungarian({{5, 1, 7}});
  REQUIRE(wide.pairs.size() == 1);
  CHECK(wide.pairs[0] == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(wide.total_cost == 1.0);

  // Tall: surplus predictions are reported unmatched.
  auto tall = hungarian({{5}, {1}, {7}});
  REQUIRE(tall.pairs.size() == 1);
  CHECK(tall.pairs[0] == std::pair<std::size_t, std::size_t>{1, 0});
  CHECK(tall.unmatched_pred_indices ==
        std::vector<std::size_t>{0, 2});

  CHECK_THROWS_AS(hungarian({}), TrainError);
  CHECK_THROWS_AS(hungarian({{1.0, std::nan("")}}), TrainError);
}

TEST_CASE("hungarian agrees with brute force on random matrices") {
  auto rng = make_rng(3, "hungarian-vs-brute");
  std::uniform_real_distribution<double> val(-5.0, 5.0);
  std::uniform_int_distribution<int> dim(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t rows = static_cast<std::size_t>(dim(rng));
    std::size_t cols = static_cast<std::size_t>(dim(rng));
    std::vector<std::vector<double>> c(rows, std::vector<double>(cols));
    for (auto& row : c)
      for (auto& v : row) v = val(rng);
    auto r = hungarian(c);
    CHECK(r.total_cost ==
          doctest::Approx(brute_force_cost(c)).epsilon(1e-9));
    CHECK(r.pairs.size() == std::min(rows, cols));
    double recomputed = 0;
    for (auto [i, j] : r.pairs) recomputed += c[i][j];
    CHECK(recomputed == doctest::Approx(r.total_cost).epsilon(1e-9));
  }
}

TEST_CASE("build_cost fixtures") {
  Box a{0.5, 0.5, 0.4, 0.4};
  Box b{0.6, 0.5, 0.4, 0.2};
  auto exact = build_cost({a}, {a}, 5.0, 2.0);
  CHECK(exact[0][0] == doctest::Approx(0.0).epsilon(1e-12));

  // With the GIoU term off, the cost is the weighted cxcywh L1 distance.
  auto l1_only = build_cost({a}, {b}, 5.0, 0.0);
  CHECK(l1_only[0][0] == doctest::Approx(5.0 * 0.3).epsilon(1e-12));

  auto rng = make_rng(9, "cost-nonneg");
  std::uniform_real_distribution<double> u(0.1, 0.9);
  for (int i = 0; i < 100; ++i) {
    Box p{u(rng), u(rng), u(rng) * 0.5, u(rng) * 0.5};
    Box g{u(rng), u(rng), u(rng) * 0.5, u(rng) * 0.5};
    CHECK(build_cost({p}, {g}, 5.0, 2.0)[0][0] >= 0.0);
  }
}

TEST_CASE("set_loss is zero for a perfect fit") {
  Box union_b{0.5, 0.5, 0.5, 0.5};
  Box g1{0.4, 0.4, 0.3, 0.3};
  Box g2{0.6, 0.6, 0.3, 0.3};
  // Matched score targets are score/5, hit exactly here.
  auto out = make_output(union_b, {g1, g2}, {1.0, 0.9});
  std::vector<ScoredBox> gt = {{g1, 5.0}, {g2, 4.5}};
  TrainConfig cfg;
  auto loss = set_loss(out, gt, cfg);
  CHECK(loss.matched == 2);
  CHECK(loss.l1_box == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.giou_box == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.score == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.total == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.total_tensor.data()[0] ==
        doctest::Approx(loss.total).epsilon(1e-12));
}

TEST_CASE("unmatched prediction near a scored proposal gets a soft target") {
  Box union_b{0.5, 0.5, 0.4, 0.4};
  Box g{0.5, 0.5, 0.4, 0.4};
  // Contained box: IoU equals the area ratio 0.92.
  Box near{0.5, 0.5, 0.4 * 0.92, 0.4};
  REQUIRE(iou(near, g) >= 0.9);
  auto out = make_output(union_b, {g, near}, {0.88, 0.38});
  std::vector<ScoredBox> gt = {{g, 4.4}};
  TrainConfig cfg;
  auto loss = set_loss(out, gt, cfg);
  CHECK(loss.matched == 1);
  CHECK(loss.smoothed == 1);
  CHECK(loss.background == 0);
  // Matched pred is exact; the unmatched pred's target is 4.4/5 = 0.88 at
  // weight 1, so the score term is smooth_l1(0.5)/2 = 0.0625.
  CHECK(loss.score == doctest::Approx(0.0625).epsilon(1e-9));
  CHECK(loss.total ==
        doctest::Approx(cfg.lambda_score * 0.0625).epsilon(1e-9));
}

TEST_CASE("the soft-target rule switches exactly at the IoU threshold") {
  Box union_b{0.5, 0.5, 0.4, 0.4};
  Box g{0.5, 0.5, 0.4, 0.4};
  Box below{0.5, 0.5, 0.4 * 0.8999, 0.4};
  REQUIRE(iou(below, g) < 0.9);
  auto out = make_output(union_b, {g, below}, {0.88, 0.38});
  std::vector<ScoredBox> gt = {{g, 4.4}};
  TrainConfig cfg;
  auto loss = set_loss(out, gt, cfg);
  CHECK(loss.smoothed == 0);
  CHECK(loss.background == 1);
  // Background target 0 at weight 0.1: (0.1 * smooth_l1(0.38)) / 1.1.
  double expect = 0.1 * (0.5 * 0.38 * 0.38) / 1.1;
  CHECK(loss.score == doctest::Approx(expect).epsilon(1e-9));

  Box at{0.5, 0.5, 0.4 * 0.92, 0.4};
  auto out2 = make_output(union_b, {g, at}, {0.88, 0.38});
  cfg.smoothing_iou_threshold = iou(at, g);  // exactly at the boundary
  auto loss2 = set_loss(out2, gt, cfg);
  CHECK(loss2.smoothed == 1);  // >= is inclusive
}

TEST_CASE("set_loss is invariant to ground-truth ordering") {
  Box union_b{0.5, 0.5, 0.6, 0.6};
  auto out = make_output(union_b,
                         {Box{0.4, 0.4, 0.2, 0.2}, Box{0.6, 0.6, 0.25, 0.2},
                          Box{0.5, 0.7, 0.2, 0.3}},
                         {0.7, 0.6, 0.5});
  std::vector<ScoredBox> gt = {{Box{0.42, 0.41, 0.2, 0.22}, 4.6},
                               {Box{0.61, 0.58, 0.24, 0.2}, 4.2},
                               {Box{0.3, 0.3, 0.3, 0.3}, 2.0}};
  TrainConfig cfg;
  auto a = set_loss(out, gt, cfg);
  std::reverse(gt.begin(), gt.end());
  auto b = set_loss(out, gt, cfg);
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-12));
  CHECK(a.l1_box == doctest::Approx(b.l1_box).epsilon(1e-12));
  CHECK(a.matched == b.matched);
}

TEST_CASE("set_loss requires at least one high-quality proposal") {
  auto out = make_output(Box{0.5, 0.5, 0.4, 0.4}, {Box{0.5, 0.5, 0.4, 0.4}},
                         {0.5});
  std::vector<ScoredBox> gt = {{Box{0.5, 0.5, 0.4, 0.4}, 3.9}};
  CHECK_THROWS_AS(set_loss(out, gt, TrainConfig{}), TrainError);
}

TEST_CASE("mosaic sampling: grid frequencies, cell-local ground truth") {
  auto dataset = tiny_dataset(12, 31);
  auto rng = make_rng(5, "mosaic-freq");
  std::array<int, 4> grid_count{};
  for (int i = 0; i < 3000; ++i) {
    auto m = sample_mosaic(dataset, rng);
    REQUIRE(m.layout.grid >= 1);
    REQUIRE(m.layout.grid <= 3);
    grid_count[m.layout.grid]++;
    CHECK(!m.text.empty());
    CHECK(!m.gt.empty());
    // Mapped ground truth lands inside the target cell.
    double g = static_cast<double>(m.layout.grid);
    double x0 = m.layout.target_col / g, y0 = m.layout.target_row / g;
    for (const auto& sb : m.gt) {
      CHECK(sb.box.cx >= x0 - 1e-9);
      CHECK(sb.box.cx <= x0 + 1 / g + 1e-9);
      CHECK(sb.box.cy >= y0 - 1e-9);
      CHECK(sb.box.cy <= y0 + 1 / g + 1e-9);
      CHECK(sb.box.w <= 1 / g + 1e-9);
    }
  }
  for (int g = 1; g <= 3; ++g) {
    double f = grid_count[g] / 3000.0;
    CHECK(f > 0.30);
    CHECK(f < 0.37);
  }
}

TEST_CASE("mosaic ground truth is the cell sample's list, rescaled") {
  auto dataset = tiny_dataset(12, 33);
  auto rng = make_rng(6, "mosaic-map");
  for (int i = 0; i < 50; ++i) {
    auto m = sample_mosaic(dataset, rng);
    if (m.layout.grid == 1) continue;
    // Some dataset sample's dense list, mapped into the target cell, must
    // reproduce the mosaic ground truth exactly.
    bool found = false;
    for (const auto& s : dataset) {
      if (s.texts[0] != m.text || s.dense_gt[0].size() != m.gt.size())
        continue;
      bool all = true;
      for (std::size_t k = 0; k < m.gt.size(); ++k) {
        Box expect = m.layout.to_global(
            m.layout.target_row, m.layout.target_col, s.dense_gt[0][k].box);
        if (std::abs(m.gt[k].box.cx - expect.cx) > 1e-12 ||
            std::abs(m.gt[k].box.w - expect.w) > 1e-12 ||
            m.gt[k].score != s.dense_gt[0][k].score)
          all = false;
      }
      found = found || all;
    }
    CHECK(found);
  }
}

TEST_CASE("mosaic sampling needs grid^2 distinct samples") {
  auto dataset = tiny_dataset(3, 35);  // too small for grids 2 and 3
  auto rng = make_rng(7, "mosaic-small");
  CHECK_THROWS_AS(
      [&] {
        for (int i = 0; i < 50; ++i) sample_mosaic(dataset, rng);
      }(),
      TrainError);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-4, 1e-6) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(cosine_lr(100, 100, 1e-4, 1e-6) ==
        doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-4, 1e-6) ==
        doctest::Approx(5.05e-5).epsilon(1e-9));
  CHECK(cosine_lr(25, 100, 1e-4, 1e-6) > cosine_lr(75, 100, 1e-4, 1e-6));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-4, 1e-6), TrainError);
}

TEST_CASE("horizontal flip helpers") {
  Box b{0.3, 0.6, 0.2, 0.4};
  Box f = flip_box(b);
  CHECK(f.cx == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(f.cy == 0.6);
  CHECK(f.w == 0.2);
  CHECK(f.h == 0.4);
  CHECK(flip_box(f).cx == doctest::Approx(b.cx).epsilon(1e-12));

  SceneSpec scene;
  scene.objects.push_back({"dog", b, {10, 20, 30}});
  SceneSpec fs = flip_scene(scene);
  CHECK(fs.objects[0].box == f);
  CHECK(fs.objects[0].concept_id == "dog");
}

TEST_CASE("train config serialization and validation") {
  TrainConfig c;
  c.epochs = 12;
  c.lambda_l1 = 3.5;
  c.query_mode = QueryMode::Key;
  TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.epochs == 12);
  CHECK(back.lambda_l1 == 3.5);
  CHECK(back.query_mode == QueryMode::Key);
  CHECK(c.validation_errors().empty());

  TrainConfig bad;
  bad.epochs = -1;
  bad.batch_size = 0;
  bad.lr_min = 1e-3;  // above lr_max
  auto errs = bad.validation_errors();
  CHECK(errs.size() >= 3);
}

TEST_CASE("training is deterministic and actually updates the weights") {
  auto dataset = tiny_dataset(12, 41);
  ConceptVocabulary vocab(kConcepts, 64, 3);
  EncoderParams ep;
  std::set<std::string> lexicon(kConcepts.begin(), kConcepts.end());
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 13;

  auto r1 = train(dataset, {}, vocab, ep, lexicon, desk_config(), cfg);
  auto r2 = train(dataset, {}, vocab, ep, lexicon, desk_config(), cfg);
  for (const auto& [name, p] : r1.model.params())
    CHECK(p.data() == r2.model.params().at(name).data());
  REQUIRE(r1.epoch_logs.size() == 1);
  CHECK(r1.epoch_logs[0] == r2.epoch_logs[0]);
  const auto& log = r1.epoch_logs[0];
  CHECK(log.contains("epoch"));
  CHECK(log.contains("lr"));
  CHECK(log.contains("total"));
  CHECK(log.at("total").get<double>() > 0.0);

  // One epoch moves the parameters away from the fresh initialization.
  DecoderModel fresh(desk_config(), cfg.seed);
  bool moved = false;
  for (const auto& [name, p] : r1.model.params())
    if (p.data() != fresh.params().at(name).data()) moved = true;
  CHECK(moved);

  // A different seed gives different weights.
  TrainConfig other = cfg;
  other.seed = 14;
  auto r3 = train(dataset, {}, vocab, ep, lexicon, desk_config(), other);
  bool differs = false;
  for (const auto& [name, p] : r3.model.params())
    if (p.data() != r1.model.params().at(name).data()) differs = true;
  CHECK(differs);
}

TEST_CASE("zero epochs returns the initial model untouched") {
  auto dataset = tiny_dataset(12, 43);
  ConceptVocabulary vocab(kConcepts, 64, 3);
  EncoderParams ep;
  std::set<std::string> lexicon(kConcepts.begin(), kConcepts.end());
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r = train(dataset, {}, vocab, ep, lexicon, desk_config(), cfg);
  DecoderModel fresh(desk_config(), cfg.seed);
  for (const auto& [name, p] : r.model.params())
    CHECK(p.data() == fresh.params().at(name).data());
  CHECK(r.epoch_logs.empty());
}
