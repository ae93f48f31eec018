#pragma once

// Annotation schemas (dense-scored proposals and per-annotator boxes), a
// deterministic synthetic scene+annotation generator, and grid-anchored
// dense proposal enumeration. Synthetic "good crops" come from a programmatic
// aesthetic oracle: tight box of the queried objects, expanded and
// recentered toward the rule-of-thirds grid.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropforge/box.hpp"
#include "cropforge/encoder.hpp"

namespace cropforge {

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScoredBox {
  Box box;
  double score = 1.0;  // in [1,5]
};

enum class SchemaKind { DenseScored, AnnotatorBoxes };

std::string schema_name(SchemaKind k);
SchemaKind parse_schema(const std::string& s);

struct AnnotatedSample {
  std::string id;
  SchemaKind schema = SchemaKind::DenseScored;
  SceneSpec scene;
  std::string image_file;  // relative to the manifest directory
  std::string scene_file;
  std::vector<std::string> texts;  // dense: 1, annotators: usually 2
  // Per-text ground truth; exactly one of these is populated per schema.
  std::vector<std::vector<ScoredBox>> dense_gt;
  std::vector<std::vector<Box>> annotator_gt;
};

struct DatasetManifest {
  SchemaKind schema = SchemaKind::DenseScored;
  std::string split;
  std::vector<std::string> sample_files;
  std::uint64_t seed = 0;
  nlohmann::json params;  // generator parameters, concepts, encoder params
  std::string dir;        // directory of the manifest (set on load)
};

struct GridProposalParams {
  int anchors_per_axis = 4;
  std::vector<double> scales{0.5, 0.65, 0.8, 0.95};
  std::vector<double> aspects{1.0, 4.0 / 3.0, 3.0 / 4.0, 16.0 / 9.0};
  // Required in-canvas area fraction before clamping. 0.8 puts the default
  // enumeration at 106 proposals ("about 90" per-image proposals).
  double min_inside = 0.8;
};

// Deduplicated valid proposals with centers on the anchor grid. Throws if
// the parameterization yields nothing.
std::vector<Box> grid_proposals(double image_aspect,
                                const GridProposalParams& params = {});

struct GeneratorParams {
  int canvas = 128;
  int min_objects = 2, max_objects = 5;
  double margin = 0.08;        // ideal-crop expansion per side
  double thirds_pull = 0.25;   // recentering strength toward the thirds grid
  double score_gamma = 1.5;    // proposal score sharpening
  double annotator_jitter = 0.03;
  int annotators_per_text = 4;
  int annotator_texts = 2;     // texts per sample in the annotator schema
  EncoderParams encoder;

  nlohmann::json to_json() const;
  static GeneratorParams from_json(const nlohmann::json& j);
};

// The aesthetic oracle. Pure function of (scene, queried objects, params).
Box ideal_crop(const SceneSpec& scene,
               const std::vector<std::size_t>& object_indices, double margin,
               double thirds_pull);

// score(b) = 1 + 4 * max(0, iou(b, ideal))^gamma, in [1,5].
double oracle_score(const Box& proposal, const Box& ideal, double gamma);

// Writes scenes, images and annotations for one split under out_dir and
// returns the manifests (dense and/or annotator schema).
struct GeneratedSplit {
  std::optional<DatasetManifest> dense;
  std::optional<DatasetManifest> annotators;
};
GeneratedSplit generate_synthetic(const std::string& out_dir,
                                  const std::string& split, int count,
                                  const std::vector<std::string>& concepts,
                                  std::uint64_t seed,
                                  const GeneratorParams& params,
                                  bool want_dense, bool want_annotators);

void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);
AnnotatedSample load_sample(const DatasetManifest& manifest,
                            const std::string& sample_file);
std::vector<AnnotatedSample> load_all_samples(const DatasetManifest& manifest);

// Vocabulary and encoder parameters recorded in a manifest.
ConceptVocabulary vocabulary_from_manifest(const DatasetManifest& m);
EncoderParams encoder_params_from_manifest(const DatasetManifest& m);

}  // namespace cropforge
