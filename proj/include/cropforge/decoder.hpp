#pragma once

// Conditioned-cropping head: M learnable query tokens, a pre-norm
// transformer decoder whose queries cross-attend to all image tokens, and
// two heads producing per-query box offsets (tanh-bounded) and quality
// scores in (0,1). Predicted boxes are union_box + offset, clamped.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cropforge/box.hpp"
#include "cropforge/encoder.hpp"
#include "cropforge/querying.hpp"
#include "cropforge/tensor.hpp"

namespace cropforge {

struct DecoderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DecoderConfig {
  std::size_t num_queries = 16;
  std::size_t num_layers = 2;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t mlp_hidden = 128;
  double offset_scale = 0.5;  // tanh range of raw offsets

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;

  // Reference configuration: M=90, 6 layers, dim 512, 8 heads, MLP 2048.
  static DecoderConfig reference();
};

nlohmann::json decoder_config_to_json(const DecoderConfig& c);
DecoderConfig decoder_config_from_json(const nlohmann::json& j);

// Learnable parameter count for a config; the closed form is documented in
// the README and pinned by a unit test.
std::size_t decoder_parameter_count(const DecoderConfig& c);

struct DecoderOutput {
  ag::Tensor offsets;  // [M,4] cxcywh deltas, each |component| <= offset_scale
  ag::Tensor scores;   // [M], strictly in (0,1)
  Box union_box;
  std::vector<Box> pred_boxes;  // clamp(union_box + offsets[m])
};

class DecoderModel {
 public:
  DecoderModel(const DecoderConfig& cfg, std::uint64_t seed);
  DecoderModel(const DecoderConfig& cfg,
               std::map<std::string, ag::Tensor> params);

  const DecoderConfig& config() const { return cfg_; }
  std::map<std::string, ag::Tensor>& params() { return params_; }
  const std::map<std::string, ag::Tensor>& params() const { return params_; }
  std::size_t parameter_count() const;

  // Q[m] = query_tokens[m] + mean of selected image tokens; with no
  // selection (base mode) the mean term is zero.
  ag::Tensor build_query(const Selection* sel) const;

  // image_tokens, pos_codes: [N, model_dim]; pos codes are added to keys
  // of the cross attention only.
  DecoderOutput decode(const ag::Tensor& queries,
                       const ag::Tensor& image_tokens,
                       const ag::Tensor& pos_codes, const Box& union_b) const;

 private:
  DecoderConfig cfg_;
  std::map<std::string, ag::Tensor> params_;
  const ag::Tensor& p(const std::string& name) const;
};

struct Prediction {
  Box box;
  double score = 0;
  std::size_t query_index = 0;
};

// Full pipeline for one image: match -> union -> build_query -> decode;
// results sorted by score descending (ties by query index), top_k kept.
// An empty query set runs base mode with the full canvas as union box.
std::vector<Prediction> predict(const DecoderModel& model,
                                const EncoderOutput& enc,
                                const QuerySet& queries, std::size_t top_k);

// Union box used when no tokens are selected (base mode): the full canvas.
inline Box full_canvas_box() { return Box{0.5, 0.5, 1.0, 1.0}; }

ag::Tensor tokens_as_tensor(const EncoderOutput& enc);
ag::Tensor pos_codes_as_tensor(const EncoderOutput& enc);

// Checkpoint round trip; the embedded config is validated against the
// stored parameter shapes on load.
void save_decoder(const std::string& path, const DecoderModel& model,
                  nlohmann::json metadata);
DecoderModel load_decoder(const std::string& path,
                          nlohmann::json* metadata_out = nullptr);

}  // namespace cropforge
