// cropforge: conditioned-cropping toolkit CLI.
//
// Subcommands: gen-data, train, eval, crop, gradcheck. Every command is
// deterministic given its flags and seed. Exit codes: 0 success, 1 internal
// failure, 2 user-input error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cropforge/checkpoint.hpp"
#include "cropforge/dataset.hpp"
#include "cropforge/decoder.hpp"
#include "cropforge/evalsuite.hpp"
#include "cropforge/gradcheck.hpp"
#include "cropforge/querying.hpp"
#include "cropforge/training.hpp"

namespace fs = std::filesystem;
using namespace cropforge;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("CROPFORGE_SEED"))
    return std::strtoull(env, nullptr, 10);
  return 7;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open file: " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write file: " + path);
  out << text;
}

std::vector<std::string> read_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("vocab file not found: " + path);
  std::vector<std::string> concepts;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (!line.empty()) concepts.push_back(line);
  }
  if (concepts.empty()) throw UsageError("vocab file is empty: " + path);
  return concepts;
}

DatasetManifest manifest_for(const std::string& data_dir,
                             const std::string& split, SchemaKind schema) {
  std::string tag = schema == SchemaKind::DenseScored ? "dense" : "annotators";
  std::string path = data_dir + "/manifest." + split + "." + tag + ".json";
  if (!fs::exists(path)) throw UsageError("manifest not found: " + path);
  return load_manifest(path);
}

// ---- gen-data ---------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, int n_train, int n_val,
                 int n_test, const std::string& vocab_path, std::uint64_t seed,
                 const std::string& schema) {
  auto concepts = read_vocab(vocab_path);
  bool want_dense = schema == "dense" || schema == "both";
  bool want_ann = schema == "annotators" || schema == "both";
  GeneratorParams params;
  params.encoder.seed = seed;
  auto one = [&](const std::string& split, int count) {
    auto g = generate_synthetic(out_dir, split, count, concepts, seed, params,
                                want_dense, want_ann);
    std::printf("%s: %d samples (%s%s%s)\n", split.c_str(), count,
                g.dense ? "dense" : "", g.dense && g.annotators ? "+" : "",
                g.annotators ? "annotators" : "");
    if (count == 0)
      std::printf("warning: split '%s' is empty\n", split.c_str());
  };
  one("train", n_train);
  one("val", n_val);
  one("test", n_test);
  return 0;
}

// ---- train ------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_ckpt,
              const std::string& config_path, const std::string& query_mode,
              bool no_mosaic, const std::string& resume_path,
              std::optional<std::uint64_t> seed, std::optional<int> epochs,
              const std::string& log_path) {
  TrainConfig tc;
  DecoderConfig dc;
  dc.num_queries = 16;
  dc.model_dim = 64;
  dc.num_layers = 2;
  if (!config_path.empty()) {
    auto j = read_json_file(config_path);
    if (j.contains("train")) tc = TrainConfig::from_json(j.at("train"));
    if (j.contains("decoder"))
      dc = decoder_config_from_json(j.at("decoder"));
  }
  // Flags override file values.
  if (!query_mode.empty()) tc.query_mode = parse_query_mode(query_mode);
  if (no_mosaic) tc.mosaic_enabled = false;
  if (seed) tc.seed = *seed;
  if (epochs) tc.epochs = *epochs;
  auto errs = tc.validation_errors();
  if (!errs.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw UsageError(msg);
  }
  dc.validate();

  auto manifest = manifest_for(data_dir, "train", SchemaKind::DenseScored);
  auto train_set = load_all_samples(manifest);
  auto vocab = vocabulary_from_manifest(manifest);
  auto enc_params = encoder_params_from_manifest(manifest);
  std::set<std::string> lexicon(vocab.concepts().begin(),
                                vocab.concepts().end());
  std::vector<AnnotatedSample> probe;
  std::string probe_path =
      data_dir + "/manifest.val.annotators.json";
  if (fs::exists(probe_path)) probe = load_all_samples(load_manifest(probe_path));

  nlohmann::json effective = {{"train", tc.to_json()},
                              {"decoder", decoder_config_to_json(dc)},
                              {"dataset_params", manifest.params}};
  effective["config_hash"] = config_hash(effective);
  std::printf("effective config: %s\n", effective.dump().c_str());

  std::optional<DecoderModel> resumed;
  ag::AdamWState resumed_opt;
  bool have_opt = false;
  int start_epoch = 0;
  if (!resume_path.empty()) {
    nlohmann::json meta;
    resumed.emplace(load_decoder(resume_path, &meta));
    auto ck = load_checkpoint(resume_path);
    if (ck.has_optimizer) {
      resumed_opt = ck.optimizer;
      have_opt = true;
    }
    start_epoch = meta.value("epoch", 0);
  }

  std::ofstream log;
  std::string lp = log_path.empty() ? out_ckpt + ".log.jsonl" : log_path;
  log.open(lp, std::ios::binary);
  if (!log) throw UsageError("cannot write log file: " + lp);
  log << nlohmann::json{{"config", effective}}.dump() << "\n";

  auto result =
      train(train_set, probe, vocab, enc_params, lexicon, dc, tc,
            resumed ? &*resumed : nullptr, have_opt ? &resumed_opt : nullptr,
            start_epoch, [&log](const nlohmann::json& l) {
              log << l.dump() << "\n";
              std::printf("%s\n", l.dump().c_str());
            });

  nlohmann::json metadata = {{"format_tool", "cropforge train"},
                             {"decoder_config", decoder_config_to_json(dc)},
                             {"train_config", tc.to_json()},
                             {"dataset_params", manifest.params},
                             {"config_hash", effective["config_hash"]},
                             {"epoch", tc.epochs},
                             {"seed", tc.seed}};
  save_checkpoint(out_ckpt, result.model.params(), metadata,
                  &result.opt_state);
  std::printf("checkpoint written: %s\n", out_ckpt.c_str());
  return 0;
}

// ---- eval -------------------------------------------------------------

int cmd_eval(const std::string& data_dir, const std::string& split,
             const std::string& ckpt_path, const std::string& metrics,
             const std::string& report_path, const std::string& predictions,
             const std::string& query_mode) {
  bool want_iou = metrics.find("iou") != std::string::npos;
  bool want_acc = metrics.find("acc") != std::string::npos;
  if (!want_iou && !want_acc)
    throw UsageError("--metrics must name iou and/or acc, got: " + metrics);

  std::optional<DecoderModel> model;
  nlohmann::json preds;
  if (!predictions.empty()) {
    preds = read_json_file(predictions);
  } else {
    if (ckpt_path.empty())
      throw UsageError("either --ckpt or --predictions is required");
    model.emplace(load_decoder(ckpt_path));
  }

  nlohmann::json report;
  auto run = [&](bool iou_metrics) {
    EvalOptions opts;
    opts.want_iou = iou_metrics;
    opts.want_acc = !iou_metrics;
    opts.query_mode = parse_query_mode(query_mode);
    auto manifest = manifest_for(
        data_dir, split,
        iou_metrics ? SchemaKind::AnnotatorBoxes : SchemaKind::DenseScored);
    EvalReport rep = model ? evaluate_model(*model, manifest, opts)
                           : evaluate_predictions(preds, manifest, opts);
    report[iou_metrics ? "iou" : "acc"] = rep.to_json();
    for (const auto& [k, v] : rep.aggregates) {
      report["aggregates"][k] = v;
      std::printf("%-12s %.6f\n", k.c_str(), v);
    }
  };
  if (want_iou) run(true);
  if (want_acc) run(false);
  if (!report_path.empty()) write_text_file(report_path, report.dump(2) + "\n");
  return 0;
}

// ---- crop -------------------------------------------------------------

struct PixelRect {
  int x1, y1, x2, y2;  // half-open pixel extents
};

// Round-half-up corner conversion with a minimum 1x1 pixel crop.
PixelRect to_pixels(const Box& b, int width, int height) {
  auto rh = [](double v) { return static_cast<int>(std::floor(v + 0.5)); };
  PixelRect r{rh(b.x1() * width), rh(b.y1() * height), rh(b.x2() * width),
              rh(b.y2() * height)};
  r.x1 = std::clamp(r.x1, 0, width - 1);
  r.y1 = std::clamp(r.y1, 0, height - 1);
  r.x2 = std::clamp(r.x2, r.x1 + 1, width);
  r.y2 = std::clamp(r.y2, r.y1 + 1, height);
  return r;
}

int cmd_crop(const std::string& image_path, const std::string& meta_path,
             const std::string& text, const std::string& query_image,
             const std::string& query_meta, const std::string& ckpt_path,
             int top_k, const std::string& out_dir) {
  if (top_k < 1) throw UsageError("--top-k must be >= 1");
  if (text.empty() == query_meta.empty())
    throw UsageError("exactly one of --text or --query-image/--query-meta "
                     "is required");
  nlohmann::json meta;
  DecoderModel model = load_decoder(ckpt_path, &meta);
  if (!meta.contains("dataset_params"))
    throw UsageError("checkpoint lacks dataset_params metadata; cannot "
                     "rebuild the encoder");
  DatasetManifest pseudo;
  pseudo.params = meta.at("dataset_params");
  auto vocab = vocabulary_from_manifest(pseudo);
  auto enc_params = encoder_params_from_manifest(pseudo);
  std::set<std::string> lexicon(vocab.concepts().begin(),
                                vocab.concepts().end());

  Image img = read_ppm(image_path);
  SceneSpec scene = scene_from_json(read_json_file(meta_path));
  auto enc = encode_image(scene, vocab, enc_params);

  QuerySet qs;
  if (!text.empty()) {
    QueryMode mode = meta.contains("train_config")
                         ? TrainConfig::from_json(meta.at("train_config"))
                               .query_mode
                         : QueryMode::Both;
    if (mode == QueryMode::None) mode = QueryMode::Both;
    qs = build_text_queries(mode, text, lexicon, vocab);
  } else {
    if (query_image.empty())
      throw UsageError("--query-meta requires --query-image");
    SceneSpec qscene = scene_from_json(read_json_file(query_meta));
    (void)read_ppm(query_image);  // validate the referenced pixels exist
    qs = build_image_query(qscene, vocab, enc_params);
  }

  auto preds = predict(model, enc, qs, static_cast<std::size_t>(top_k));
  fs::create_directories(out_dir);
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t k = 0; k < preds.size(); ++k) {
    PixelRect r = to_pixels(preds[k].box, img.width, img.height);
    Image crop;
    crop.width = r.x2 - r.x1;
    crop.height = r.y2 - r.y1;
    crop.rgb.resize(static_cast<std::size_t>(crop.width) * crop.height * 3);
    for (int y = r.y1; y < r.y2; ++y)
      for (int x = r.x1; x < r.x2; ++x)
        for (int c = 0; c < 3; ++c)
          crop.rgb[((static_cast<std::size_t>(y - r.y1) * crop.width) +
                    (x - r.x1)) *
                       3 +
                   c] =
              img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c];
    std::string name = "crop-" + std::to_string(k) + ".ppm";
    write_ppm(out_dir + "/" + name, crop);
    records.push_back({{"file", name},
                       {"box", box_to_json(preds[k].box)},
                       {"pixels", {r.x1, r.y1, r.x2, r.y2}},
                       {"score", preds[k].score},
                       {"query_index", preds[k].query_index}});
  }
  nlohmann::json out = {{"crops", records},
                        {"config_hash", meta.value("config_hash", "")},
                        {"top_k", top_k}};
  write_text_file(out_dir + "/crops.json", out.dump(2) + "\n");
  std::printf("wrote %zu crops to %s\n", preds.size(), out_dir.c_str());
  return 0;
}

// ---- gradcheck --------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int rounds) {
  auto results = run_gradcheck(seed, rounds, true);
  for (const auto& c : results)
    std::printf("%-18s worst rel err %.3e over %zu coords  [%s]\n",
                c.name.c_str(), c.worst_rel_err, c.coords_checked,
                c.passed ? "ok" : "FAIL");
  return all_passed(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cropforge: conditioned aesthetic cropping toolkit"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out, gd_vocab, gd_schema = "both";
  int gd_train = 0, gd_val = 0, gd_test = 0;
  std::uint64_t gd_seed = default_seed();
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", gd_out, "Output directory")->required();
  gen->add_option("--train", gd_train, "Training sample count")->required();
  gen->add_option("--val", gd_val, "Validation sample count");
  gen->add_option("--test", gd_test, "Test sample count");
  gen->add_option("--vocab", gd_vocab, "Concept vocabulary file")->required();
  gen->add_option("--seed", gd_seed, "Generation seed");
  gen->add_option("--schema", gd_schema, "dense|annotators|both")
      ->check(CLI::IsMember({"dense", "annotators", "both"}));

  // train
  std::string tr_data, tr_out, tr_config, tr_qmode, tr_resume, tr_log;
  bool tr_no_mosaic = false;
  std::optional<std::uint64_t> tr_seed;
  std::optional<int> tr_epochs;
  auto* tr = app.add_subcommand("train", "Train the cropping decoder");
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output checkpoint path")->required();
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--query-mode", tr_qmode, "both|main|key|none")
      ->check(CLI::IsMember({"both", "main", "key", "none"}));
  tr->add_flag("--no-mosaic", tr_no_mosaic, "Disable mosaic augmentation");
  tr->add_option("--resume", tr_resume, "Checkpoint to resume from");
  tr->add_option("--seed", tr_seed, "Training seed");
  tr->add_option("--epochs", tr_epochs, "Epoch count");
  tr->add_option("--log", tr_log, "JSON-lines log path");

  // eval
  std::string ev_data, ev_split = "test", ev_ckpt, ev_metrics = "iou",
              ev_report, ev_preds, ev_qmode = "both";
  auto* ev = app.add_subcommand("eval", "Evaluate cropping metrics");
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "Dataset split");
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path");
  ev->add_option("--metrics", ev_metrics, "Comma list: iou,acc");
  ev->add_option("--report", ev_report, "Report JSON output path");
  ev->add_option("--predictions", ev_preds, "External prediction JSON");
  ev->add_option("--query-mode", ev_qmode, "both|main|key|none")
      ->check(CLI::IsMember({"both", "main", "key", "none"}));

  // crop
  std::string cr_image, cr_meta, cr_text, cr_qimage, cr_qmeta, cr_ckpt,
      cr_out;
  int cr_topk = 1;
  auto* cr = app.add_subcommand("crop", "Produce conditioned crops");
  cr->add_option("--image", cr_image, "Input PPM image")->required();
  cr->add_option("--meta", cr_meta, "Scene sidecar JSON")->required();
  cr->add_option("--text", cr_text, "Text condition");
  cr->add_option("--query-image", cr_qimage, "Query PPM image");
  cr->add_option("--query-meta", cr_qmeta, "Query scene sidecar JSON");
  cr->add_option("--ckpt", cr_ckpt, "Checkpoint path")->required();
  cr->add_option("--top-k", cr_topk, "Number of crops");
  cr->add_option("--out", cr_out, "Output directory")->required();

  // gradcheck
  std::uint64_t gc_seed = default_seed();
  int gc_rounds = 20;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference grad suite");
  gc->add_option("--seed", gc_seed, "Suite seed");
  gc->add_option("--rounds", gc_rounds, "Rounds per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gd_out, gd_train, gd_val, gd_test, gd_vocab,
                          gd_seed, gd_schema);
    if (tr->parsed())
      return cmd_train(tr_data, tr_out, tr_config, tr_qmode, tr_no_mosaic,
                       tr_resume, tr_seed, tr_epochs, tr_log);
    if (ev->parsed())
      return cmd_eval(ev_data, ev_split, ev_ckpt, ev_metrics, ev_report,
                      ev_preds, ev_qmode);
    if (cr->parsed())
      return cmd_crop(cr_image, cr_meta, cr_text, cr_qimage, cr_qmeta,
                      cr_ckpt, cr_topk, cr_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_rounds);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ag::TensorError& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  } catch (const std::runtime_error& e) {
    // Module preconditions (bad schema, missing files, empty queries, ...)
    // are user-input problems.
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return 1;
}
