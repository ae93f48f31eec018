#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "cropforge/evalsuite.hpp"

using namespace cropforge;

namespace {

const std::vector<std::string> kConcepts = {"woman", "dog", "boat", "plate",
                                            "tree"};

struct Splits {
  DatasetManifest dense, annotators;
};

Splits make_splits(std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() /
                 ("cropforge-eval-test-" + std::to_string(seed));
  fs::remove_all(dir);
  fs::create_directories(dir);
  GeneratorParams gp;
  auto split =
      generate_synthetic(dir.string(), "e", 4, kConcepts, seed, gp, true,
                         true);
  return {*split.dense, *split.annotators};
}

DecoderModel make_model() {
  DecoderConfig c;
  c.num_queries = 16;
  c.model_dim = 64;
  c.num_layers = 2;
  return DecoderModel(c, 77);
}

}  // namespace

TEST_CASE("iou_mean_max fixtures") {
  Box pred{0.5, 0.5, 0.4, 0.4};
  auto exact = iou_mean_max(pred, {pred});
  CHECK(exact.first == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(exact.second == doctest::Approx(1.0).epsilon(1e-12));

  // Contained boxes: IoU equals the area ratio (0.5 and 0.7).
  auto two = iou_mean_max(pred, {Box{0.5, 0.5, 0.4, 0.2},
                                 Box{0.5, 0.5, 0.4, 0.28}});
  CHECK(two.first == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(two.second == doctest::Approx(0.7).epsilon(1e-9));

  auto disjoint = iou_mean_max(pred, {Box{0.05, 0.05, 0.05, 0.05}});
  CHECK(disjoint.first == 0.0);
  CHECK(disjoint.second == 0.0);

  CHECK_THROWS_AS(iou_mean_max(pred, {}), EvalError);
}

TEST_CASE("acc_k_n fixtures") {
  std::vector<ScoredBox> gt = {
      {Box{0.1, 0.1, 0.1, 0.1}, 5.0}, {Box{0.3, 0.1, 0.1, 0.1}, 4.8},
      {Box{0.5, 0.1, 0.1, 0.1}, 4.6}, {Box{0.7, 0.1, 0.1, 0.1}, 3.0},
      {Box{0.9, 0.1, 0.1, 0.1}, 2.0}, {Box{0.1, 0.3, 0.1, 0.1}, 1.0}};

  // A prediction landing on the rank-5 proposal counts for N=5, not N=3.
  std::vector<Box> rank5 = {gt[4].box};
  CHECK(acc_k_n(rank5, gt, 1, 5) == 1);
  CHECK(acc_k_n(rank5, gt, 1, 3) == 0);

  std::vector<Box> top = {gt[0].box};
  CHECK(acc_k_n(top, gt, 1, 1) == 1);
  CHECK(acc_k_n(top, gt, 1, 5) == 1);

  // N = |gt| makes every proposal acceptable.
  CHECK(acc_k_n(rank5, gt, 1, 6) == 1);

  // K=2: one good prediction among the K suffices.
  CHECK(acc_k_n({gt[5].box, gt[1].box}, gt, 2, 3) == 1);
  CHECK(acc_k_n({gt[5].box, gt[4].box}, gt, 2, 3) == 0);

  CHECK_THROWS_AS(acc_k_n(rank5, gt, 1, 7), EvalError);   // |gt| < N
  CHECK_THROWS_AS(acc_k_n(rank5, gt, 2, 5), EvalError);   // |pred| != K

  // A free-floating box maps to its highest-IoU proposal.
  std::vector<Box> near_top = {Box{0.105, 0.1, 0.1, 0.1}};
  CHECK(acc_k_n(near_top, gt, 1, 1) == 1);

  // Identical proposals: the tie maps to the lowest index.
  std::vector<ScoredBox> dup = {{Box{0.5, 0.5, 0.2, 0.2}, 1.0},
                                {Box{0.5, 0.5, 0.2, 0.2}, 5.0}};
  CHECK(acc_k_n({Box{0.5, 0.5, 0.2, 0.2}}, dup, 1, 1) == 0);
}

TEST_CASE("score ties in the N-best set break toward the lowest index") {
  std::vector<ScoredBox> gt = {{Box{0.2, 0.2, 0.1, 0.1}, 4.0},
                               {Box{0.8, 0.8, 0.1, 0.1}, 4.0},
                               {Box{0.5, 0.5, 0.1, 0.1}, 1.0}};
  CHECK(acc_k_n({gt[0].box}, gt, 1, 1) == 1);  // index 0 wins the tie
  CHECK(acc_k_n({gt[1].box}, gt, 1, 1) == 0);
}

TEST_CASE("schema checks name the requirement") {
  auto splits = make_splits(51);
  auto model = make_model();
  EvalOptions iou_opts;
  iou_opts.want_iou = true;
  EvalOptions acc_opts;
  acc_opts.want_acc = true;

  CHECK_THROWS_WITH_AS(evaluate_model(model, splits.dense, iou_opts),
                       doctest::Contains("annotator-boxes"), EvalError);
  CHECK_THROWS_WITH_AS(evaluate_model(model, splits.annotators, acc_opts),
                       doctest::Contains("dense-scored"), EvalError);
  CHECK_THROWS_AS(evaluate_model(model, splits.dense, EvalOptions{}),
                  EvalError);
}

TEST_CASE("model evaluation: aggregates, determinism, CSV") {
  auto splits = make_splits(53);
  auto model = make_model();

  EvalOptions iou_opts;
  iou_opts.want_iou = true;
  auto rep = evaluate_model(model, splits.annotators, iou_opts);
  CHECK(rep.records.size() == 8);  // 4 samples x 2 texts
  REQUIRE(rep.aggregates.count("IoU-Mean"));
  REQUIRE(rep.aggregates.count("IoU-Max"));
  CHECK(rep.aggregates.at("IoU-Mean") <= rep.aggregates.at("IoU-Max"));
  double mean_of_means = 0;
  for (const auto& r : rep.records) mean_of_means += *r.iou_mean;
  CHECK(rep.aggregates.at("IoU-Mean") ==
        doctest::Approx(mean_of_means / 8).epsilon(1e-12));

  auto rep2 = evaluate_model(model, splits.annotators, iou_opts);
  CHECK(rep.to_json().dump() == rep2.to_json().dump());
  CHECK(rep.to_csv() == rep2.to_csv());
  CHECK(rep.to_csv().rfind("metric,value\n", 0) == 0);

  EvalOptions acc_opts;
  acc_opts.want_acc = true;
  auto acc = evaluate_model(model, splits.dense, acc_opts);
  REQUIRE(acc.aggregates.count("ACC_1_5"));
  REQUIRE(acc.aggregates.count("ACC_1_10"));
  CHECK(acc.aggregates.at("ACC_1_5") <= acc.aggregates.at("ACC_1_10"));
  for (const auto& r : acc.records) {
    CHECK(r.acc_hits.count(5));
    CHECK(r.acc_hits.count(10));
  }
}

TEST_CASE("prediction-file evaluation matches the in-process run") {
  auto splits = make_splits(55);
  auto model = make_model();
  EvalOptions iou_opts;
  iou_opts.want_iou = true;
  auto direct = evaluate_model(model, splits.annotators, iou_opts);

  nlohmann::json preds = nlohmann::json::array();
  for (const auto& r : direct.records) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : r.boxes) boxes.push_back(box_to_json(b));
    preds.push_back({{"id", r.id},
                     {"text_index", r.text_index},
                     {"boxes", boxes},
                     {"scores", r.scores}});
  }
  auto from_file = evaluate_predictions(preds, splits.annotators, iou_opts);
  CHECK(from_file.aggregates == direct.aggregates);

  // Entry order does not matter.
  nlohmann::json shuffled = preds;
  std::reverse(shuffled.begin(), shuffled.end());
  auto rev = evaluate_predictions(shuffled, splits.annotators, iou_opts);
  CHECK(rev.aggregates == direct.aggregates);

  // Duplicates and gaps are rejected.
  nlohmann::json dup = preds;
  dup.push_back(preds[0]);
  CHECK_THROWS_WITH_AS(evaluate_predictions(dup, splits.annotators, iou_opts),
                       doctest::Contains("duplicate"), EvalError);
  nlohmann::json missing = preds;
  missing.erase(0);
  CHECK_THROWS_WITH_AS(
      evaluate_predictions(missing, splits.annotators, iou_opts),
      doctest::Contains("missing"), EvalError);
  CHECK_THROWS_AS(evaluate_predictions(nlohmann::json::object(),
                                       splits.annotators, iou_opts),
                  EvalError);
}
