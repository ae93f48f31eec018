#pragma once

// Query-set construction (text keywords or image query), cosine matching of
// query embeddings to encoder tokens, and the mosaic-training ambiguity
// filter.

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cropforge/box.hpp"
#include "cropforge/encoder.hpp"

namespace cropforge {

struct QueryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class QueryMode { Both, Main, Key, None, Image };

QueryMode parse_query_mode(const std::string& s);
std::string query_mode_name(QueryMode m);

struct QuerySet {
  QueryMode mode = QueryMode::Both;
  std::vector<std::vector<double>> embeddings;  // W unit vectors
  std::vector<std::string> source_strings;      // empty for image mode

  std::size_t count() const { return embeddings.size(); }
};

struct Selection {
  std::vector<std::size_t> token_indices;    // W, each in [0, N)
  std::vector<std::vector<double>> tokens;   // W x D image tokens
  std::vector<Box> boxes;                    // encoder initial boxes
  std::vector<double> similarities;          // cosines
  bool used_fallback = false;  // set when the ambiguity filter emptied out

  std::size_t count() const { return token_indices.size(); }
};

// One token per line, UTF-8, lowercase.
std::set<std::string> load_token_file(const std::string& path);
const std::set<std::string>& default_stopwords();

// Lowercased tokens, stop-words removed, plural-folded, filtered to lexicon
// membership; order-preserving and deduplicated. May return an empty list.
std::vector<std::string> extract_keywords(
    const std::string& text, const std::set<std::string>& lexicon,
    const std::set<std::string>& stopwords = default_stopwords());

// Top-1 token per query embedding by cosine similarity against the class
// embeddings; ties break toward the lowest index. Throws when W = 0.
Selection match(const QuerySet& queries, const EncoderOutput& enc);

// Mosaic ambiguity filter: drops selected entries whose box center lies
// outside the target cell, or that cover less than half of best_gt's area.
// Never returns an empty selection; fallback entries are flagged.
Selection filter_training_selection(const Selection& sel, const Box& best_gt,
                                    const Box& target_cell_region,
                                    const EncoderOutput& enc);

QuerySet build_text_queries(QueryMode mode, const std::string& text,
                            const std::set<std::string>& lexicon,
                            const ConceptVocabulary& vocab,
                            const std::set<std::string>& stopwords =
                                default_stopwords());

QuerySet build_image_query(const SceneSpec& query_scene,
                           const ConceptVocabulary& vocab,
                           const EncoderParams& params);

}  // namespace cropforge
