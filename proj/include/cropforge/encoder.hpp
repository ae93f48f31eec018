#pragma once

// Deterministic synthetic stand-in for a vision-language backbone. Emits,
// per grid token: an image token, a unit-norm classification embedding and
// an initial (grounding-style) box. The encoder is frozen and non-learnable;
// scenes are recognized through sidecar metadata, not pixels.

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropforge/box.hpp"

namespace cropforge {

struct EncoderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rgb = std::array<int, 3>;

struct SceneObject {
  std::string concept_id;
  Box box;  // normalized, within [0,1]^2
  Rgb color{0, 0, 0};
};

struct SceneSpec {
  int canvas_w = 128, canvas_h = 128;
  Rgb background{240, 240, 240};
  std::vector<SceneObject> objects;  // later objects paint over earlier
};

nlohmann::json scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const nlohmann::json& j);

// Unit concept embeddings generated from (seed, concept_id). Distinct
// concepts keep pairwise |cos| <= 0.3 (regenerated with a tweak on
// violation). A reserved background vector covers object-free tokens.
class ConceptVocabulary {
 public:
  ConceptVocabulary(std::vector<std::string> concepts, std::size_t dim,
                    std::uint64_t seed);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::string>& concepts() const { return concepts_; }
  bool contains(const std::string& concept_id) const;
  const std::vector<double>& vector_of(const std::string& concept_id) const;
  const std::vector<double>& background() const { return background_; }

 private:
  std::vector<std::string> concepts_;
  std::map<std::string, std::vector<double>> vectors_;
  std::vector<double> background_;
  std::size_t dim_;
  std::uint64_t seed_;
};

struct EncoderParams {
  int grid_side = 12;    // N = grid_side^2 tokens
  std::size_t dim = 64;  // embedding width; must be divisible by 4
  double noise = 0.05;   // max magnitude of per-token embedding noise
  std::uint64_t seed = 1;
};

struct EncoderOutput {
  int grid_side = 0;
  std::size_t dim = 0;
  std::vector<double> image_tokens;      // N x dim, row-major
  std::vector<double> class_embeddings;  // N x dim, rows unit-norm
  std::vector<Box> initial_boxes;        // N
  std::vector<std::uint8_t> is_background;  // N

  std::size_t num_tokens() const { return initial_boxes.size(); }
};

// 2D sinusoidal code per token center, N x dim.
std::vector<double> sinusoidal_position_codes(int grid_side, std::size_t dim);

EncoderOutput encode_image(const SceneSpec& scene,
                           const ConceptVocabulary& vocab,
                           const EncoderParams& params);

// Strips one trailing 's' so plural query phrases match singular
// concept ids.
std::string fold_plural(const std::string& token);

// Unit-normalized mean of concept vectors whose surface form appears in the
// lowercased text (a trailing 's' is stripped before lookup). Unknown-only
// text maps to a deterministic unit vector with cos < 0.3 to every concept.
std::vector<double> embed_text(const std::string& text,
                               const ConceptVocabulary& vocab);

// Mean class embedding over non-background tokens of the query image.
std::vector<double> embed_query_image(const SceneSpec& query,
                                      const ConceptVocabulary& vocab,
                                      const EncoderParams& params);

// ---- pixels ---------------------------------------------------------------
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // 3 bytes per pixel, row-major
};

Image render_scene(const SceneSpec& scene);
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Maps every cell scene's objects into the global mosaic canvas.
SceneSpec compose_scenes(const std::vector<SceneSpec>& cells,
                         const MosaicLayout& layout);

}  // namespace cropforge
