#include "cropforge/querying.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace cropforge {

QueryMode parse_query_mode(const std::string& s) {
  if (s == "both") return QueryMode::Both;
  if (s == "main") return QueryMode::Main;
  if (s == "key") return QueryMode::Key;
  if (s == "none") return QueryMode::None;
  if (s == "image") return QueryMode::Image;
  throw QueryError("unknown query mode '" + s + "'");
}

std::string query_mode_name(QueryMode m) {
  switch (m) {
    case QueryMode::Both: return "both";
    case QueryMode::Main: return "main";
    case QueryMode::Key: return "key";
    case QueryMode::None: return "none";
    case QueryMode::Image: return "image";
  }
  return "?";
}

std::set<std::string> load_token_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw QueryError("cannot open token file '" + path + "'");
  std::set<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",    "an",    "and",   "are",  "as",    "at",   "be",    "been",
      "but",  "by",    "for",   "from", "had",   "has",  "have",  "he",
      "her",  "his",   "i",     "in",   "into",  "is",   "it",    "its",
      "my",   "near",  "next",  "of",   "on",    "or",   "our",   "over",
      "she",  "some",  "that",  "the",  "their", "them", "there", "these",
      "they", "this",  "three", "to",   "two",   "under", "was",  "we",
      "were", "which", "with",  "you"};
  return words;
}

namespace {

std::vector<std::string> tokenize_lower(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isalpha(static_cast<unsigned char>(ch)))
      cur.push_back(
          static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

double cosine(const std::vector<double>& a, const double* b, std::size_t d) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<std::string> extract_keywords(
    const std::string& text, const std::set<std::string>& lexicon,
    const std::set<std::string>& stopwords) {
  if (text.empty()) throw QueryError("extract_keywords: empty text");
  std::vector<std::string> out;
  for (const auto& raw : tokenize_lower(text)) {
    if (stopwords.count(raw)) continue;
    std::string tok = lexicon.count(raw) ? raw : fold_plural(raw);
    if (!lexicon.count(tok)) continue;
    if (std::find(out.begin(), out.end(), tok) == out.end()) out.push_back(tok);
  }
  return out;
}

Selection match(const QuerySet& queries, const EncoderOutput& enc) {
  if (queries.count() == 0)
    throw QueryError("match: empty query set (use base mode instead)");
  Selection sel;
  std::size_t n = enc.num_tokens();
  std::size_t d = enc.dim;
  for (const auto& q : queries.embeddings) {
    if (q.size() != d)
      throw QueryError("match: query dim " + std::to_string(q.size()) +
                       " != encoder dim " + std::to_string(d));
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t t = 0; t < n; ++t) {
      double sim = cosine(q, enc.class_embeddings.data() + t * d, d);
      if (sim > best_sim) {  // strict: ties keep the lowest index
        best_sim = sim;
        best = t;
      }
    }
    sel.token_indices.push_back(best);
    sel.tokens.emplace_back(enc.image_tokens.begin() + static_cast<long>(best * d),
                            enc.image_tokens.begin() + static_cast<long>((best + 1) * d));
    sel.boxes.push_back(enc.initial_boxes[best]);
    sel.similarities.push_back(best_sim);
  }
  return sel;
}

namespace {

bool center_in(const Box& b, const Box& region) {
  return b.cx >= region.x1() && b.cx <= region.x2() && b.cy >= region.y1() &&
         b.cy <= region.y2();
}

double coverage_of_gt(const Box& b, const Box& gt) {
  if (gt.area() <= 0) return 0;
  double iw = std::min(b.x2(), gt.x2()) - std::max(b.x1(), gt.x1());
  double ih = std::min(b.y2(), gt.y2()) - std::max(b.y1(), gt.y1());
  return std::max(iw, 0.0) * std::max(ih, 0.0) / gt.area();
}

}  // namespace

Selection filter_training_selection(const Selection& sel, const Box& best_gt,
                                    const Box& target_cell_region,
                                    const EncoderOutput& enc) {
  Selection out;
  for (std::size_t i = 0; i < sel.count(); ++i) {
    if (!center_in(sel.boxes[i], target_cell_region)) continue;
    if (coverage_of_gt(sel.boxes[i], best_gt) < 0.5) continue;
    out.token_indices.push_back(sel.token_indices[i]);
    out.tokens.push_back(sel.tokens[i]);
    out.boxes.push_back(sel.boxes[i]);
    out.similarities.push_back(sel.similarities[i]);
  }
  if (!out.token_indices.empty()) return out;

  // All dropped: keep the most similar in-cell entry.
  long best = -1;
  for (std::size_t i = 0; i < sel.count(); ++i) {
    if (!center_in(sel.boxes[i], target_cell_region)) continue;
    if (best < 0 ||
        sel.similarities[i] > sel.similarities[static_cast<std::size_t>(best)])
      best = static_cast<long>(i);
  }
  out.used_fallback = true;
  if (best >= 0) {
    auto i = static_cast<std::size_t>(best);
    out.token_indices.push_back(sel.token_indices[i]);
    out.tokens.push_back(sel.tokens[i]);
    out.boxes.push_back(sel.boxes[i]);
    out.similarities.push_back(sel.similarities[i]);
    return out;
  }

  // Nothing in the cell at all: fall back to the cell's center token.
  int g = enc.grid_side;
  int row = std::clamp(static_cast<int>(target_cell_region.cy * g), 0, g - 1);
  int col = std::clamp(static_cast<int>(target_cell_region.cx * g), 0, g - 1);
  std::size_t t = static_cast<std::size_t>(row) * g + col;
  out.token_indices.push_back(t);
  out.tokens.emplace_back(
      enc.image_tokens.begin() + static_cast<long>(t * enc.dim),
      enc.image_tokens.begin() + static_cast<long>((t + 1) * enc.dim));
  out.boxes.push_back(target_cell_region);
  out.similarities.push_back(0.0);
  return out;
}

QuerySet build_text_queries(QueryMode mode, const std::string& text,
                            const std::set<std::string>& lexicon,
                            const ConceptVocabulary& vocab,
                            const std::set<std::string>& stopwords) {
  QuerySet qs;
  qs.mode = mode;
  if (mode == QueryMode::None) return qs;
  if (mode == QueryMode::Image)
    throw QueryError("build_text_queries: image mode needs a query image");
  if (text.empty()) throw QueryError("build_text_queries: empty text");

  auto push_unique = [&qs](const std::string& src, std::vector<double> emb) {
    for (const auto& existing : qs.embeddings)
      if (existing == emb) return;
    qs.embeddings.push_back(std::move(emb));
    qs.source_strings.push_back(src);
  };

  if (mode == QueryMode::Both || mode == QueryMode::Main)
    push_unique(text, embed_text(text, vocab));
  if (mode == QueryMode::Both || mode == QueryMode::Key) {
    auto keywords = extract_keywords(text, lexicon, stopwords);
    if (mode == QueryMode::Key && keywords.empty())
      throw QueryError("key mode: no keywords found in '" + text + "'");
    for (const auto& k : keywords) push_unique(k, embed_text(k, vocab));
  }
  return qs;
}

QuerySet build_image_query(const SceneSpec& query_scene,
                           const ConceptVocabulary& vocab,
                           const EncoderParams& params) {
  QuerySet qs;
  qs.mode = QueryMode::Image;
  qs.embeddings.push_back(embed_query_image(query_scene, vocab, params));
  return qs;
}

}  // namespace cropforge
