#include "cropforge/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "cropforge/checkpoint.hpp"
#include "cropforge/rng.hpp"

namespace cropforge {

using ag::Tensor;

void DecoderConfig::validate() const {
  if (num_queries < 1) throw DecoderError("DecoderConfig: num_queries >= 1");
  if (num_layers < 1) throw DecoderError("DecoderConfig: num_layers >= 1");
  if (num_heads < 1 || model_dim % num_heads != 0)
    throw DecoderError("DecoderConfig: model_dim must be divisible by num_heads");
  if (mlp_hidden < 1) throw DecoderError("DecoderConfig: mlp_hidden >= 1");
  if (offset_scale <= 0) throw DecoderError("DecoderConfig: offset_scale > 0");
}

DecoderConfig DecoderConfig::reference() {
  return DecoderConfig{90, 6, 512, 8, 2048, 0.5};
}

nlohmann::json decoder_config_to_json(const DecoderConfig& c) {
  return {{"num_queries", c.num_queries},   {"num_layers", c.num_layers},
          {"model_dim", c.model_dim},       {"num_heads", c.num_heads},
          {"mlp_hidden", c.mlp_hidden},     {"offset_scale", c.offset_scale}};
}

DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  DecoderConfig c;
  c.num_queries = j.value("num_queries", c.num_queries);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.offset_scale = j.value("offset_scale", c.offset_scale);
  c.validate();
  return c;
}

std::size_t decoder_parameter_count(const DecoderConfig& c) {
  std::size_t d = c.model_dim, f = c.mlp_hidden;
  std::size_t per_layer = 8 * (d * d + d)  // self + cross attn (wq,wk,wv,wo + biases)
                          + 6 * d          // three layernorm scale/bias pairs
                          + 2 * d * f + f + d;  // MLP
  return c.num_queries * d + c.num_layers * per_layer + 2 * d  // final LN
         + 2 * (d * d + d) + 4 * d + 4  // offset head (d->d->d->4)
         + d + 1;                       // score head
}

namespace {

Tensor seeded_linear_weight(std::mt19937_64& rng, std::size_t rows,
                            std::size_t cols) {
  double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> data(rows * cols);
  for (double& x : data) x = u(rng);
  return Tensor::leaf({rows, cols}, std::move(data), true);
}

Tensor zeros_param(ag::Shape shape) {
  return Tensor::zeros(std::move(shape), true);
}

Tensor ones_param(std::size_t n) {
  return Tensor::leaf({n}, std::vector<double>(n, 1.0), true);
}

}  // namespace

DecoderModel::DecoderModel(const DecoderConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  std::size_t d = cfg_.model_dim, f = cfg_.mlp_hidden;
  auto rng = make_rng(seed, "decoder-init");

  {  // query tokens ~ N(0, 0.02)
    std::normal_distribution<double> g(0.0, 0.02);
    std::vector<double> q(cfg_.num_queries * d);
    for (double& x : q) x = g(rng);
    params_.emplace("query_tokens",
                    Tensor::leaf({cfg_.num_queries, d}, std::move(q), true));
  }
  auto add_attn = [&](const std::string& prefix) {
    for (const char* w : {"wq", "wk", "wv", "wo"})
      params_.emplace(prefix + "." + w, seeded_linear_weight(rng, d, d));
    for (const char* b : {"bq", "bk", "bv", "bo"})
      params_.emplace(prefix + "." + b, zeros_param({d}));
  };
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    std::string lp = "layers." + std::to_string(l);
    for (const char* ln : {"ln1", "ln2", "ln3"}) {
      params_.emplace(lp + "." + ln + ".scale", ones_param(d));
      params_.emplace(lp + "." + ln + ".bias", zeros_param({d}));
    }
    add_attn(lp + ".self");
    add_attn(lp + ".cross");
    params_.emplace(lp + ".mlp.w1", seeded_linear_weight(rng, d, f));
    params_.emplace(lp + ".mlp.b1", zeros_param({f}));
    params_.emplace(lp + ".mlp.w2", seeded_linear_weight(rng, f, d));
    params_.emplace(lp + ".mlp.b2", zeros_param({d}));
  }
  params_.emplace("final_ln.scale", ones_param(d));
  params_.emplace("final_ln.bias", zeros_param({d}));
  params_.emplace("offset_head.w1", seeded_linear_weight(rng, d, d));
  params_.emplace("offset_head.b1", zeros_param({d}));
  params_.emplace("offset_head.w2", seeded_linear_weight(rng, d, d));
  params_.emplace("offset_head.b2", zeros_param({d}));
  // Zero-initialized final layers: training starts at pred = union box,
  // score = 0.5.
  params_.emplace("offset_head.w3", zeros_param({d, 4}));
  params_.emplace("offset_head.b3", zeros_param({4}));
  params_.emplace("score_head.w", zeros_param({d, 1}));
  params_.emplace("score_head.b", zeros_param({1}));
}

DecoderModel::DecoderModel(const DecoderConfig& cfg,
                           std::map<std::string, ag::Tensor> params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  DecoderModel ref(cfg_, 0);
  if (ref.params_.size() != params_.size())
    throw DecoderError("DecoderModel: parameter set does not match config");
  for (const auto& [name, t] : ref.params_) {
    auto it = params_.find(name);
    if (it == params_.end())
      throw DecoderError("DecoderModel: missing parameter '" + name + "'");
    if (it->second.shape() != t.shape())
      throw DecoderError("DecoderModel: shape mismatch for '" + name + "': " +
                         ag::shape_str(it->second.shape()) + " vs " +
                         ag::shape_str(t.shape()));
  }
}

std::size_t DecoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

const Tensor& DecoderModel::p(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw DecoderError("DecoderModel: unknown parameter '" + name + "'");
  return it->second;
}

Tensor DecoderModel::build_query(const Selection* sel) const {
  const Tensor& q = p("query_tokens");
  if (!sel || sel->count() == 0) return ag::add_scalar(q, 0.0);
  std::size_t d = cfg_.model_dim;
  std::vector<double> mean(d, 0.0);
  for (const auto& tok : sel->tokens) {
    if (tok.size() != d)
      throw DecoderError("build_query: token dim mismatch");
    for (std::size_t k = 0; k < d; ++k) mean[k] += tok[k];
  }
  for (double& x : mean) x /= static_cast<double>(sel->count());
  return ag::add(q, Tensor::leaf({d}, std::move(mean)));
}

namespace {

// Multi-head attention; pre-norm input already applied by the caller.
Tensor mha(const std::map<std::string, Tensor>& params,
           const std::string& prefix, const Tensor& q_in, const Tensor& k_in,
           const Tensor& v_in, std::size_t heads) {
  auto get = [&params](const std::string& n) -> const Tensor& {
    return params.at(n);
  };
  Tensor q = ag::add(ag::matmul(q_in, get(prefix + ".wq")), get(prefix + ".bq"));
  Tensor k = ag::add(ag::matmul(k_in, get(prefix + ".wk")), get(prefix + ".bk"));
  Tensor v = ag::add(ag::matmul(v_in, get(prefix + ".wv")), get(prefix + ".bv"));
  std::size_t d = q.shape()[1];
  std::size_t dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::size_t> cols(dh);
    for (std::size_t i = 0; i < dh; ++i) cols[i] = h * dh + i;
    Tensor qh = ag::index_select(q, 1, cols);
    Tensor kh = ag::index_select(k, 1, cols);
    Tensor vh = ag::index_select(v, 1, cols);
    Tensor attn = ag::softmax(
        ag::scalar_mul(ag::matmul(qh, ag::transpose2d(kh)), scale), 1);
    outs.push_back(ag::matmul(attn, vh));
  }
  Tensor merged = ag::concat(outs, 1);
  return ag::add(ag::matmul(merged, get(prefix + ".wo")), get(prefix + ".bo"));
}

Tensor pre_norm(const std::map<std::string, Tensor>& params,
                const std::string& prefix, const Tensor& x) {
  return ag::add(ag::mul(ag::layernorm(x, 1e-5), params.at(prefix + ".scale")),
                 params.at(prefix + ".bias"));
}

}  // namespace

DecoderOutput DecoderModel::decode(const Tensor& queries,
                                   const Tensor& image_tokens,
                                   const Tensor& pos_codes,
                                   const Box& union_b) const {
  std::size_t d = cfg_.model_dim;
  if (queries.shape().size() != 2 || queries.shape()[1] != d)
    throw DecoderError("decode: queries must be [M," + std::to_string(d) +
                       "], got " + ag::shape_str(queries.shape()));
  if (image_tokens.shape() != pos_codes.shape() ||
      image_tokens.shape().size() != 2 || image_tokens.shape()[1] != d)
    throw DecoderError("decode: image tokens/pos codes must be [N," +
                       std::to_string(d) + "]");

  Tensor keys = ag::add(image_tokens, pos_codes);  // pos codes on K only
  Tensor x = queries;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    std::string lp = "layers." + std::to_string(l);
    Tensor h1 = pre_norm(params_, lp + ".ln1", x);
    x = ag::add(x, mha(params_, lp + ".self", h1, h1, h1,
                       cfg_.num_heads));
    Tensor h2 = pre_norm(params_, lp + ".ln2", x);
    x = ag::add(x, mha(params_, lp + ".cross", h2, keys, image_tokens,
                       cfg_.num_heads));
    Tensor h3 = pre_norm(params_, lp + ".ln3", x);
    Tensor mlp = ag::add(
        ag::matmul(ag::gelu(ag::add(ag::matmul(h3, p(lp + ".mlp.w1")),
                                    p(lp + ".mlp.b1"))),
                   p(lp + ".mlp.w2")),
        p(lp + ".mlp.b2"));
    x = ag::add(x, mlp);
  }
  Tensor f = pre_norm(params_, "final_ln", x);

  Tensor h = ag::relu(
      ag::add(ag::matmul(f, p("offset_head.w1")), p("offset_head.b1")));
  h = ag::relu(ag::add(ag::matmul(h, p("offset_head.w2")), p("offset_head.b2")));
  Tensor raw = ag::add(ag::matmul(h, p("offset_head.w3")), p("offset_head.b3"));
  Tensor offsets = ag::scalar_mul(ag::tanh_op(raw), cfg_.offset_scale);

  Tensor score_raw =
      ag::add(ag::matmul(f, p("score_head.w")), p("score_head.b"));
  Tensor scores =
      ag::reshape(ag::sigmoid(score_raw), {cfg_.num_queries});

  DecoderOutput out;
  out.offsets = offsets;
  out.scores = scores;
  out.union_box = union_b;
  out.pred_boxes.reserve(cfg_.num_queries);
  const auto& od = offsets.data();
  for (std::size_t m = 0; m < cfg_.num_queries; ++m)
    out.pred_boxes.push_back(apply_offset(
        union_b, Box{od[m * 4], od[m * 4 + 1], od[m * 4 + 2], od[m * 4 + 3]}));
  return out;
}

Tensor tokens_as_tensor(const EncoderOutput& enc) {
  return Tensor::leaf({enc.num_tokens(), enc.dim}, enc.image_tokens);
}

Tensor pos_codes_as_tensor(const EncoderOutput& enc) {
  return Tensor::leaf({enc.num_tokens(), enc.dim},
                      sinusoidal_position_codes(enc.grid_side, enc.dim));
}

std::vector<Prediction> predict(const DecoderModel& model,
                                const EncoderOutput& enc,
                                const QuerySet& queries, std::size_t top_k) {
  Box union_b;
  Tensor q;
  if (queries.count() == 0) {
    union_b = full_canvas_box();
    q = model.build_query(nullptr);
  } else {
    Selection sel = match(queries, enc);
    union_b = union_box(sel.boxes);
    q = model.build_query(&sel);
  }
  auto out = model.decode(q, tokens_as_tensor(enc), pos_codes_as_tensor(enc),
                          union_b);
  std::vector<Prediction> preds;
  const auto& s = out.scores.data();
  for (std::size_t m = 0; m < out.pred_boxes.size(); ++m)
    preds.push_back({out.pred_boxes[m], s[m], m});
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Prediction& a, const Prediction& b) {
                     if (a.score != b.score) return a.score > b.score;
                     return a.query_index < b.query_index;
                   });
  if (preds.size() > top_k) preds.resize(top_k);
  return preds;
}

void save_decoder(const std::string& path, const DecoderModel& model,
                  nlohmann::json metadata) {
  metadata["decoder_config"] = decoder_config_to_json(model.config());
  save_checkpoint(path, model.params(), metadata);
}

DecoderModel load_decoder(const std::string& path,
                          nlohmann::json* metadata_out) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.metadata.contains("decoder_config"))
    throw DecoderError("load_decoder: checkpoint missing decoder_config");
  DecoderConfig cfg = decoder_config_from_json(ck.metadata.at("decoder_config"));
  if (metadata_out) *metadata_out = ck.metadata;
  return DecoderModel(cfg, std::move(ck.params));
}

}  // namespace cropforge
