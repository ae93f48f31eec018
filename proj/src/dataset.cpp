#include "cropforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cropforge/rng.hpp"

namespace fs = std::filesystem;

namespace cropforge {

std::string schema_name(SchemaKind k) {
  return k == SchemaKind::DenseScored ? "dense-scored" : "annotator-boxes";
}

SchemaKind parse_schema(const std::string& s) {
  if (s == "dense-scored") return SchemaKind::DenseScored;
  if (s == "annotator-boxes") return SchemaKind::AnnotatorBoxes;
  throw DatasetError("unknown schema '" + s + "'");
}

std::vector<Box> grid_proposals(double image_aspect,
                                const GridProposalParams& params) {
  if (params.anchors_per_axis < 1)
    throw DatasetError("grid_proposals: anchors_per_axis >= 1");
  std::vector<Box> out;
  std::set<std::array<long, 4>> seen;  // dedup at 1e-6 resolution
  int a = params.anchors_per_axis;
  for (int iy = 0; iy < a; ++iy)
    for (int ix = 0; ix < a; ++ix) {
      double cx = (ix + 1.0) / (a + 1.0);
      double cy = (iy + 1.0) / (a + 1.0);
      for (double scale : params.scales)
        for (double aspect : params.aspects) {
          // h is the scale; w follows the aspect ratio in canvas units.
          double h = scale;
          double w = scale * aspect / image_aspect;
          Box raw{cx, cy, w, h};
          if (raw.area() <= 0) continue;
          double ix1 = std::clamp(raw.x1(), 0.0, 1.0);
          double ix2 = std::clamp(raw.x2(), 0.0, 1.0);
          double iy1 = std::clamp(raw.y1(), 0.0, 1.0);
          double iy2 = std::clamp(raw.y2(), 0.0, 1.0);
          double inside = std::max(ix2 - ix1, 0.0) * std::max(iy2 - iy1, 0.0);
          if (inside / raw.area() < params.min_inside) continue;
          Box b = clamp_box(raw);
          std::array<long, 4> key{std::lround(b.cx * 1e6),
                                  std::lround(b.cy * 1e6),
                                  std::lround(b.w * 1e6),
                                  std::lround(b.h * 1e6)};
          if (seen.insert(key).second) out.push_back(b);
        }
    }
  if (out.empty()) throw DatasetError("grid_proposals: empty proposal set");
  return out;
}

Box ideal_crop(const SceneSpec& scene,
               const std::vector<std::size_t>& object_indices, double margin,
               double thirds_pull) {
  if (object_indices.empty())
    throw DatasetError("ideal_crop: no queried objects");
  std::vector<Box> boxes;
  for (auto i : object_indices) {
    if (i >= scene.objects.size())
      throw DatasetError("ideal_crop: object index out of range");
    boxes.push_back(scene.objects[i].box);
  }
  Box tight = union_box(boxes);
  Box expanded{tight.cx, tight.cy, tight.w + 2 * margin, tight.h + 2 * margin};
  // Pull the center toward the nearest rule-of-thirds intersection.
  const double thirds[2] = {1.0 / 3.0, 2.0 / 3.0};
  double best_d = 1e9, px = expanded.cx, py = expanded.cy;
  for (double tx : thirds)
    for (double ty : thirds) {
      double dx = tx - expanded.cx, dy = ty - expanded.cy;
      double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        px = tx;
        py = ty;
      }
    }
  expanded.cx += thirds_pull * (px - expanded.cx);
  expanded.cy += thirds_pull * (py - expanded.cy);
  return clamp_box(expanded);
}

double oracle_score(const Box& proposal, const Box& ideal, double gamma) {
  double i = std::max(iou(proposal, ideal), 0.0);
  return 1.0 + 4.0 * std::pow(i, gamma);
}

nlohmann::json GeneratorParams::to_json() const {
  return {{"canvas", canvas},
          {"min_objects", min_objects},
          {"max_objects", max_objects},
          {"margin", margin},
          {"thirds_pull", thirds_pull},
          {"score_gamma", score_gamma},
          {"annotator_jitter", annotator_jitter},
          {"annotators_per_text", annotators_per_text},
          {"annotator_texts", annotator_texts},
          {"encoder",
           {{"grid_side", encoder.grid_side},
            {"dim", encoder.dim},
            {"noise", encoder.noise},
            {"seed", encoder.seed}}}};
}

GeneratorParams GeneratorParams::from_json(const nlohmann::json& j) {
  GeneratorParams p;
  p.canvas = j.value("canvas", p.canvas);
  p.min_objects = j.value("min_objects", p.min_objects);
  p.max_objects = j.value("max_objects", p.max_objects);
  p.margin = j.value("margin", p.margin);
  p.thirds_pull = j.value("thirds_pull", p.thirds_pull);
  p.score_gamma = j.value("score_gamma", p.score_gamma);
  p.annotator_jitter = j.value("annotator_jitter", p.annotator_jitter);
  p.annotators_per_text = j.value("annotators_per_text", p.annotators_per_text);
  p.annotator_texts = j.value("annotator_texts", p.annotator_texts);
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    p.encoder.grid_side = e.value("grid_side", p.encoder.grid_side);
    p.encoder.dim = e.value("dim", p.encoder.dim);
    p.encoder.noise = e.value("noise", p.encoder.noise);
    p.encoder.seed = e.value("seed", p.encoder.seed);
  }
  return p;
}

namespace {

SceneSpec make_scene(std::mt19937_64& rng,
                     const std::vector<std::string>& concepts,
                     const GeneratorParams& params) {
  SceneSpec scene;
  scene.canvas_w = scene.canvas_h = params.canvas;
  std::uniform_int_distribution<int> bgc(200, 250);
  scene.background = {bgc(rng), bgc(rng), bgc(rng)};
  std::uniform_int_distribution<int> nobj(params.min_objects,
                                          params.max_objects);
  int n = std::min<int>(nobj(rng), static_cast<int>(concepts.size()));
  // distinct concepts per scene
  std::vector<std::size_t> pool(concepts.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (int k = 0; k < n; ++k) {
    std::uniform_int_distribution<std::size_t> pick(
        static_cast<std::size_t>(k), pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(k)], pool[pick(rng)]);
  }
  std::uniform_real_distribution<double> size(0.15, 0.4);
  std::uniform_int_distribution<int> chan(0, 180);
  for (int k = 0; k < n; ++k) {
    SceneObject obj;
    obj.concept_id = concepts[pool[static_cast<std::size_t>(k)]];
    double w = size(rng), h = size(rng);
    std::uniform_real_distribution<double> cx(w / 2, 1.0 - w / 2);
    std::uniform_real_distribution<double> cy(h / 2, 1.0 - h / 2);
    obj.box = Box{cx(rng), cy(rng), w, h};
    obj.color = {chan(rng), chan(rng), chan(rng)};
    scene.objects.push_back(std::move(obj));
  }
  return scene;
}

// Queried-object subset plus a natural-language phrase naming them.
struct TextQuery {
  std::string text;
  std::vector<std::size_t> object_indices;
};

TextQuery make_text(std::mt19937_64& rng, const SceneSpec& scene) {
  std::size_t n = scene.objects.size();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng);
  std::size_t subset = r < 0.5 ? 1 : (r < 0.85 ? 2 : 3);
  subset = std::min(subset, n);
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t k = 0; k < subset; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  TextQuery q;
  q.object_indices.assign(pool.begin(),
                          pool.begin() + static_cast<long>(subset));
  std::sort(q.object_indices.begin(), q.object_indices.end());
  std::vector<std::string> names;
  for (auto i : q.object_indices) names.push_back(scene.objects[i].concept_id);
  if (names.size() == 1) {
    const char* tmpl[] = {"a photo of the ", "the ", "a close view of the "};
    q.text = tmpl[rng() % 3] + names[0];
  } else if (names.size() == 2) {
    q.text = "the " + names[0] + " and the " + names[1];
  } else {
    q.text = "the " + names[0] + ", the " + names[1] + " and the " + names[2];
  }
  return q;
}

nlohmann::json scored_boxes_json(const std::vector<ScoredBox>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& sb : v)
    arr.push_back({{"box", box_to_json(sb.box)}, {"score", sb.score}});
  return arr;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open: " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed JSON in " + path + ": " + e.what());
  }
}

}  // namespace

GeneratedSplit generate_synthetic(const std::string& out_dir,
                                  const std::string& split, int count,
                                  const std::vector<std::string>& concepts,
                                  std::uint64_t seed,
                                  const GeneratorParams& params,
                                  bool want_dense, bool want_annotators) {
  if (concepts.size() < 5)
    throw DatasetError("generate_synthetic: vocabulary needs >= 5 concepts");
  if (count < 0) throw DatasetError("generate_synthetic: negative count");
  fs::create_directories(out_dir);

  nlohmann::json shared_params = params.to_json();
  shared_params["concepts"] = concepts;

  DatasetManifest dense_m, ann_m;
  dense_m.schema = SchemaKind::DenseScored;
  ann_m.schema = SchemaKind::AnnotatorBoxes;
  dense_m.split = ann_m.split = split;
  dense_m.seed = ann_m.seed = seed;
  dense_m.params = ann_m.params = shared_params;
  dense_m.dir = ann_m.dir = out_dir;

  auto proposals = grid_proposals(1.0);

  for (int idx = 0; idx < count; ++idx) {
    std::string id = split + "-" + std::to_string(idx);
    // Per-sample derived seed: schedule-independent.
    auto rng = make_rng(seed, "sample:" + id);
    SceneSpec scene = make_scene(rng, concepts, params);

    std::string scene_file = id + ".scene.json";
    std::string image_file = id + ".ppm";
    write_json(out_dir + "/" + scene_file, scene_to_json(scene));
    write_ppm(out_dir + "/" + image_file, render_scene(scene));

    if (want_dense) {
      TextQuery q = make_text(rng, scene);
      Box ideal =
          ideal_crop(scene, q.object_indices, params.margin, params.thirds_pull);
      std::vector<ScoredBox> gt;
      gt.push_back({ideal, 5.0});  // guarantees a high-quality proposal
      for (const auto& b : proposals)
        gt.push_back({b, oracle_score(b, ideal, params.score_gamma)});
      nlohmann::json sj = {{"id", id},
                           {"schema", schema_name(SchemaKind::DenseScored)},
                           {"image", image_file},
                           {"scene", scene_file},
                           {"texts", {q.text}},
                           {"gt", nlohmann::json::array({scored_boxes_json(gt)})}};
      std::string file = id + ".dense.json";
      write_json(out_dir + "/" + file, sj);
      dense_m.sample_files.push_back(file);
    }
    if (want_annotators) {
      nlohmann::json texts = nlohmann::json::array();
      nlohmann::json gts = nlohmann::json::array();
      for (int t = 0; t < params.annotator_texts; ++t) {
        TextQuery q = make_text(rng, scene);
        Box ideal = ideal_crop(scene, q.object_indices, params.margin,
                               params.thirds_pull);
        nlohmann::json boxes = nlohmann::json::array();
        for (int a = 0; a < params.annotators_per_text; ++a) {
          auto jrng = make_rng(seed, "jitter:" + id + ":" + std::to_string(t) +
                                         ":" + std::to_string(a));
          std::uniform_real_distribution<double> jit(-params.annotator_jitter,
                                                     params.annotator_jitter);
          Box b{ideal.cx + jit(jrng), ideal.cy + jit(jrng),
                ideal.w + jit(jrng), ideal.h + jit(jrng)};
          boxes.push_back(box_to_json(clamp_box(b)));
        }
        texts.push_back(q.text);
        gts.push_back(boxes);
      }
      nlohmann::json sj = {{"id", id},
                           {"schema", schema_name(SchemaKind::AnnotatorBoxes)},
                           {"image", image_file},
                           {"scene", scene_file},
                           {"texts", texts},
                           {"gt", gts}};
      std::string file = id + ".ann.json";
      write_json(out_dir + "/" + file, sj);
      ann_m.sample_files.push_back(file);
    }
  }

  GeneratedSplit out;
  if (want_dense) {
    save_manifest(out_dir + "/manifest." + split + ".dense.json", dense_m);
    out.dense = std::move(dense_m);
  }
  if (want_annotators) {
    save_manifest(out_dir + "/manifest." + split + ".annotators.json", ann_m);
    out.annotators = std::move(ann_m);
  }
  return out;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json j = {{"schema", schema_name(m.schema)},
                      {"split", m.split},
                      {"samples", m.sample_files},
                      {"seed", m.seed},
                      {"params", m.params}};
  write_json(path, j);
}

DatasetManifest load_manifest(const std::string& path) {
  nlohmann::json j = read_json(path);
  DatasetManifest m;
  m.schema = parse_schema(j.at("schema").get<std::string>());
  m.split = j.at("split").get<std::string>();
  m.sample_files = j.at("samples").get<std::vector<std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.params = j.at("params");
  m.dir = fs::path(path).parent_path().string();
  if (m.dir.empty()) m.dir = ".";
  // Validate referenced files and id uniqueness up front.
  std::set<std::string> ids;
  for (const auto& f : m.sample_files) {
    std::string full = m.dir + "/" + f;
    if (!fs::exists(full))
      throw DatasetError("manifest references missing file: " + full);
    if (!ids.insert(f).second)
      throw DatasetError("manifest lists duplicate sample file: " + f);
  }
  return m;
}

AnnotatedSample load_sample(const DatasetManifest& manifest,
                            const std::string& sample_file) {
  nlohmann::json j = read_json(manifest.dir + "/" + sample_file);
  AnnotatedSample s;
  s.id = j.at("id").get<std::string>();
  auto fail = [&s](const std::string& what) -> DatasetError {
    return DatasetError("sample '" + s.id + "': " + what);
  };
  SchemaKind k = parse_schema(j.at("schema").get<std::string>());
  if (k != manifest.schema)
    throw fail("schema '" + schema_name(k) + "' does not match manifest '" +
               schema_name(manifest.schema) + "'");
  s.schema = k;
  s.image_file = j.at("image").get<std::string>();
  s.scene_file = j.at("scene").get<std::string>();
  s.scene = scene_from_json(read_json(manifest.dir + "/" + s.scene_file));
  s.texts = j.at("texts").get<std::vector<std::string>>();
  if (s.texts.empty()) throw fail("field 'texts' is empty");
  const auto& gt = j.at("gt");
  if (gt.size() != s.texts.size())
    throw fail("field 'gt' must have one entry per text");
  if (k == SchemaKind::DenseScored) {
    for (const auto& per_text : gt) {
      std::vector<ScoredBox> v;
      for (const auto& e : per_text) {
        ScoredBox sb{box_from_json(e.at("box")), e.at("score").get<double>()};
        if (sb.score < 1.0 || sb.score > 5.0)
          throw fail("field 'score' out of [1,5]: " +
                     std::to_string(sb.score));
        v.push_back(sb);
      }
      if (v.empty()) throw fail("empty dense proposal list");
      s.dense_gt.push_back(std::move(v));
    }
  } else {
    for (const auto& per_text : gt) {
      std::vector<Box> v;
      for (const auto& e : per_text) v.push_back(box_from_json(e));
      if (v.empty()) throw fail("empty annotator box list");
      s.annotator_gt.push_back(std::move(v));
    }
  }
  return s;
}

std::vector<AnnotatedSample> load_all_samples(const DatasetManifest& manifest) {
  std::vector<AnnotatedSample> out;
  out.reserve(manifest.sample_files.size());
  for (const auto& f : manifest.sample_files)
    out.push_back(load_sample(manifest, f));
  return out;
}

ConceptVocabulary vocabulary_from_manifest(const DatasetManifest& m) {
  auto concepts = m.params.at("concepts").get<std::vector<std::string>>();
  auto ep = encoder_params_from_manifest(m);
  return ConceptVocabulary(std::move(concepts), ep.dim, ep.seed);
}

EncoderParams encoder_params_from_manifest(const DatasetManifest& m) {
  GeneratorParams gp = GeneratorParams::from_json(m.params);
  return gp.encoder;
}

}  // namespace cropforge
