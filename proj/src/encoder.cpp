#include "cropforge/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "cropforge/rng.hpp"

namespace cropforge {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize(std::vector<double>& v) {
  double n = std::sqrt(dot(v, v));
  if (n == 0) throw EncoderError("normalize: zero vector");
  for (double& x : v) x /= n;
}

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = gauss(rng);
  normalize(v);
  return v;
}

}  // namespace

ConceptVocabulary::ConceptVocabulary(std::vector<std::string> concepts,
                                     std::size_t dim, std::uint64_t seed)
    : concepts_(std::move(concepts)), dim_(dim), seed_(seed) {
  if (dim_ < 32)
    throw EncoderError("ConceptVocabulary: dim must be >= 32 for separation");
  if (dim_ % 4 != 0)
    throw EncoderError("ConceptVocabulary: dim must be divisible by 4");
  for (const auto& c : concepts_) {
    if (c.empty()) throw EncoderError("ConceptVocabulary: empty concept id");
    if (vectors_.count(c))
      throw EncoderError("ConceptVocabulary: duplicate concept '" + c + "'");
    // Regenerate with a per-pair tweak until |cos| <= 0.3 against all
    // previously placed concepts.
    for (std::uint64_t tweak = 0;; ++tweak) {
      auto rng = make_rng(seed_, "concept:" + c + ":" + std::to_string(tweak));
      auto v = random_unit(rng, dim_);
      bool ok = true;
      for (const auto& [other, u] : vectors_)
        if (std::abs(dot(v, u)) > 0.3) {
          ok = false;
          break;
        }
      if (ok) {
        vectors_[c] = std::move(v);
        break;
      }
      if (tweak > 10000)
        throw EncoderError("ConceptVocabulary: cannot separate '" + c + "'");
    }
  }
  for (std::uint64_t tweak = 0;; ++tweak) {
    auto rng = make_rng(seed_, "background:" + std::to_string(tweak));
    auto v = random_unit(rng, dim_);
    bool ok = true;
    for (const auto& [other, u] : vectors_)
      if (std::abs(dot(v, u)) > 0.3) {
        ok = false;
        break;
      }
    if (ok) {
      background_ = std::move(v);
      break;
    }
  }
}

bool ConceptVocabulary::contains(const std::string& concept_id) const {
  return vectors_.count(concept_id) > 0;
}

const std::vector<double>& ConceptVocabulary::vector_of(
    const std::string& concept_id) const {
  auto it = vectors_.find(concept_id);
  if (it == vectors_.end())
    throw EncoderError("ConceptVocabulary: unknown concept '" + concept_id +
                       "'");
  return it->second;
}

std::vector<double> sinusoidal_position_codes(int grid_side, std::size_t dim) {
  if (dim % 4 != 0)
    throw EncoderError("sinusoidal_position_codes: dim must be divisible by 4");
  std::size_t n = static_cast<std::size_t>(grid_side) * grid_side;
  std::size_t half = dim / 2;
  std::vector<double> codes(n * dim);
  for (int i = 0; i < grid_side; ++i)
    for (int j = 0; j < grid_side; ++j) {
      double y = (i + 0.5) / grid_side;
      double x = (j + 0.5) / grid_side;
      std::size_t base = (static_cast<std::size_t>(i) * grid_side + j) * dim;
      for (std::size_t k = 0; k < half / 2; ++k) {
        double omega =
            2.0 * M_PI * std::pow(100.0, 2.0 * k / static_cast<double>(half));
        codes[base + 2 * k] = std::sin(omega * x);
        codes[base + 2 * k + 1] = std::cos(omega * x);
        codes[base + half + 2 * k] = std::sin(omega * y);
        codes[base + half + 2 * k + 1] = std::cos(omega * y);
      }
    }
  return codes;
}

EncoderOutput encode_image(const SceneSpec& scene,
                           const ConceptVocabulary& vocab,
                           const EncoderParams& params) {
  if (vocab.dim() != params.dim)
    throw EncoderError("encode_image: vocabulary dim " +
                       std::to_string(vocab.dim()) + " != encoder dim " +
                       std::to_string(params.dim));
  int g = params.grid_side;
  std::size_t d = params.dim;
  std::size_t n = static_cast<std::size_t>(g) * g;
  EncoderOutput out;
  out.grid_side = g;
  out.dim = d;
  out.class_embeddings.resize(n * d);
  out.initial_boxes.resize(n);
  out.is_background.resize(n);

  auto pos = sinusoidal_position_codes(g, d);

  // Fixed seeded mixing matrix (2d x d) applied to [class_emb ; pos_code].
  auto mix_rng = make_rng(params.seed, "mixmatrix");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> mix(2 * d * d);
  double scale = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
  for (double& x : mix) x = gauss(mix_rng) * scale;

  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) {
      std::size_t t = static_cast<std::size_t>(i) * g + j;
      double cxp = (j + 0.5) / g;
      double cyp = (i + 0.5) / g;
      Box cell{(j + 0.5) / static_cast<double>(g),
               (i + 0.5) / static_cast<double>(g), 1.0 / g, 1.0 / g};

      // Objects whose box covers the token center.
      std::vector<const SceneObject*> covering;
      for (const auto& obj : scene.objects)
        if (obj.box.x1() <= cxp && cxp <= obj.box.x2() &&
            obj.box.y1() <= cyp && cyp <= obj.box.y2())
          covering.push_back(&obj);

      std::vector<double> emb(d, 0.0);
      if (covering.empty()) {
        emb = vocab.background();
        out.is_background[t] = 1;
        out.initial_boxes[t] = cell;
      } else {
        for (const auto* obj : covering) {
          const auto& v = vocab.vector_of(obj->concept_id);
          for (std::size_t k = 0; k < d; ++k) emb[k] += v[k];
        }
        normalize(emb);
        if (params.noise > 0) {
          auto nrng = make_rng(params.seed, "noise:" + std::to_string(t));
          auto nv = random_unit(nrng, d);
          std::uniform_real_distribution<double> mag(0.0, params.noise);
          double m = mag(nrng);
          for (std::size_t k = 0; k < d; ++k) emb[k] += m * nv[k];
          normalize(emb);
        }
        // Initial box: covering object with greatest overlap with the cell.
        const SceneObject* best = nullptr;
        double best_overlap = -1;
        for (const auto* obj : covering) {
          double iw = std::min(obj->box.x2(), cell.x2()) -
                      std::max(obj->box.x1(), cell.x1());
          double ih = std::min(obj->box.y2(), cell.y2()) -
                      std::max(obj->box.y1(), cell.y1());
          double ov = std::max(iw, 0.0) * std::max(ih, 0.0);
          if (ov > best_overlap) {
            best_overlap = ov;
            best = obj;
          }
        }
        out.initial_boxes[t] = clamp_box(best->box);
      }
      std::copy(emb.begin(), emb.end(),
                out.class_embeddings.begin() + static_cast<long>(t * d));
    }

  // image_token = [class_emb ; pos_code] * mix
  out.image_tokens.assign(n * d, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t r = 0; r < 2 * d; ++r) {
      double in = r < d ? out.class_embeddings[t * d + r]
                        : pos[t * d + (r - d)];
      if (in == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c)
        out.image_tokens[t * d + c] += in * mix[r * d + c];
    }
  return out;
}

namespace {

std::vector<std::string> tokenize_lower(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isalpha(static_cast<unsigned char>(ch)))
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

}  // namespace

std::string fold_plural(const std::string& token) {
  if (token.size() > 2 && token.back() == 's')
    return token.substr(0, token.size() - 1);
  return token;
}

std::vector<double> embed_text(const std::string& text,
                               const ConceptVocabulary& vocab) {
  if (text.empty()) throw EncoderError("embed_text: empty text");
  auto tokens = tokenize_lower(text);
  std::vector<std::string> matched;
  for (const auto& tok : tokens) {
    std::string key;
    if (vocab.contains(tok))
      key = tok;
    else {
      std::string folded = fold_plural(tok);
      if (folded != tok && vocab.contains(folded)) key = folded;
    }
    if (!key.empty() &&
        std::find(matched.begin(), matched.end(), key) == matched.end())
      matched.push_back(key);
  }
  std::size_t d = vocab.dim();
  if (!matched.empty()) {
    std::vector<double> emb(d, 0.0);
    for (const auto& c : matched) {
      const auto& v = vocab.vector_of(c);
      for (std::size_t k = 0; k < d; ++k) emb[k] += v[k];
    }
    for (double& x : emb) x /= static_cast<double>(matched.size());
    double n = std::sqrt(dot(emb, emb));
    for (double& x : emb) x /= n;
    return emb;
  }
  // No vocabulary hit: deterministic unit vector separated from all concepts.
  for (std::uint64_t tweak = 0;; ++tweak) {
    auto rng = make_rng(vocab.seed(),
                        "unknown-text:" + text + ":" + std::to_string(tweak));
    auto v = random_unit(rng, d);
    bool ok = true;
    for (const auto& c : vocab.concepts())
      if (std::abs(dot(v, vocab.vector_of(c))) >= 0.3) {
        ok = false;
        break;
      }
    if (ok) return v;
  }
}

std::vector<double> embed_query_image(const SceneSpec& query,
                                      const ConceptVocabulary& vocab,
                                      const EncoderParams& params) {
  auto enc = encode_image(query, vocab, params);
  std::size_t d = enc.dim;
  std::vector<double> emb(d, 0.0);
  std::size_t count = 0;
  for (std::size_t t = 0; t < enc.num_tokens(); ++t) {
    if (enc.is_background[t]) continue;
    for (std::size_t k = 0; k < d; ++k)
      emb[k] += enc.class_embeddings[t * d + k];
    ++count;
  }
  if (count == 0)
    throw EncoderError("query image contains no object tokens");
  normalize(emb);
  return emb;
}

Image render_scene(const SceneSpec& scene) {
  if (scene.canvas_w <= 0 || scene.canvas_h <= 0)
    throw EncoderError("render_scene: zero-size canvas");
  Image img;
  img.width = scene.canvas_w;
  img.height = scene.canvas_h;
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      std::size_t p = (static_cast<std::size_t>(y) * img.width + x) * 3;
      img.rgb[p] = static_cast<std::uint8_t>(scene.background[0]);
      img.rgb[p + 1] = static_cast<std::uint8_t>(scene.background[1]);
      img.rgb[p + 2] = static_cast<std::uint8_t>(scene.background[2]);
    }
  // z-order = list order; later objects paint over earlier
  for (const auto& obj : scene.objects) {
    int x1 = static_cast<int>(std::floor(obj.box.x1() * img.width));
    int x2 = static_cast<int>(std::ceil(obj.box.x2() * img.width));
    int y1 = static_cast<int>(std::floor(obj.box.y1() * img.height));
    int y2 = static_cast<int>(std::ceil(obj.box.y2() * img.height));
    x1 = std::clamp(x1, 0, img.width);
    x2 = std::clamp(x2, 0, img.width);
    y1 = std::clamp(y1, 0, img.height);
    y2 = std::clamp(y2, 0, img.height);
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) {
        std::size_t p = (static_cast<std::size_t>(y) * img.width + x) * 3;
        img.rgb[p] = static_cast<std::uint8_t>(obj.color[0]);
        img.rgb[p + 1] = static_cast<std::uint8_t>(obj.color[1]);
        img.rgb[p + 2] = static_cast<std::uint8_t>(obj.color[2]);
      }
  }
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw EncoderError("write_ppm: cannot open '" + path + "'");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw EncoderError("read_ppm: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  if (magic != "P6") throw EncoderError("read_ppm: not a P6 file: " + path);
  int w, h, maxval;
  f >> w >> h >> maxval;
  f.get();  // single whitespace after header
  if (maxval != 255) throw EncoderError("read_ppm: expected 8-bit maxval");
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()),
         static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw EncoderError("read_ppm: truncated pixel data in " + path);
  return img;
}

nlohmann::json scene_to_json(const SceneSpec& scene) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : scene.objects)
    objs.push_back({{"concept", o.concept_id},
                    {"box", box_to_json(o.box)},
                    {"color", {o.color[0], o.color[1], o.color[2]}}});
  return {{"canvas", {scene.canvas_w, scene.canvas_h}},
          {"background",
           {scene.background[0], scene.background[1], scene.background[2]}},
          {"objects", objs}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.canvas_w = j.at("canvas")[0].get<int>();
  s.canvas_h = j.at("canvas")[1].get<int>();
  for (int k = 0; k < 3; ++k)
    s.background[static_cast<std::size_t>(k)] =
        j.at("background")[static_cast<std::size_t>(k)].get<int>();
  for (const auto& oj : j.at("objects")) {
    SceneObject o;
    o.concept_id = oj.at("concept").get<std::string>();
    if (o.concept_id.empty())
      throw EncoderError("scene_from_json: empty concept id");
    o.box = box_from_json(oj.at("box"));
    for (int k = 0; k < 3; ++k)
      o.color[static_cast<std::size_t>(k)] =
          oj.at("color")[static_cast<std::size_t>(k)].get<int>();
    s.objects.push_back(std::move(o));
  }
  return s;
}

SceneSpec compose_scenes(const std::vector<SceneSpec>& cells,
                         const MosaicLayout& layout) {
  std::size_t need = static_cast<std::size_t>(layout.grid) * layout.grid;
  if (cells.size() != need)
    throw EncoderError("compose_scenes: expected " + std::to_string(need) +
                       " cells, got " + std::to_string(cells.size()));
  SceneSpec out;
  out.canvas_w = cells[0].canvas_w * layout.grid;
  out.canvas_h = cells[0].canvas_h * layout.grid;
  out.background = cells[0].background;
  for (int r = 0; r < layout.grid; ++r)
    for (int c = 0; c < layout.grid; ++c) {
      const auto& cell = cells[static_cast<std::size_t>(r) * layout.grid + c];
      for (const auto& obj : cell.objects) {
        SceneObject mapped = obj;
        mapped.box = layout.to_global(r, c, obj.box);
        out.objects.push_back(std::move(mapped));
      }
    }
  return out;
}

}  // namespace cropforge
