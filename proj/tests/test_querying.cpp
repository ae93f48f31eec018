#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cropforge/querying.hpp"

using namespace cropforge;

namespace {

const std::vector<std::string> kConcepts = {"woman", "dog", "boat", "plate",
                                            "tree"};
const std::set<std::string> kLexicon(kConcepts.begin(), kConcepts.end());

ConceptVocabulary make_vocab() { return ConceptVocabulary(kConcepts, 64, 3); }

EncoderOutput two_object_encoding(const ConceptVocabulary& vocab,
                                  double noise = 0.05) {
  EncoderParams p;
  p.noise = noise;
  SceneSpec scene;
  scene.objects.push_back({"dog", Box{0.3, 0.3, 0.25, 0.25}, {200, 30, 30}});
  scene.objects.push_back({"boat", Box{0.7, 0.7, 0.3, 0.3}, {30, 30, 200}});
  return encode_image(scene, vocab, p);
}

}  // namespace

TEST_CASE("query mode names round trip") {
  for (auto m : {QueryMode::Both, QueryMode::Main, QueryMode::Key,
                 QueryMode::None, QueryMode::Image})
    CHECK(parse_query_mode(query_mode_name(m)) == m);
  CHECK_THROWS_AS(parse_query_mode("bogus"), QueryError);
}

TEST_CASE("keyword extraction fixtures") {
  CHECK(extract_keywords("a woman and three dogs on the boat", kLexicon) ==
        std::vector<std::string>{"woman", "dog", "boat"});
  CHECK(extract_keywords("the the the", kLexicon).empty());
  CHECK(extract_keywords("Dogs dogs DOG", kLexicon) ==
        std::vector<std::string>{"dog"});
  CHECK(extract_keywords("purple elephants dancing", kLexicon).empty());
}

TEST_CASE("match selects the most similar token per query") {
  auto vocab = make_vocab();
  auto enc = two_object_encoding(vocab);
  QuerySet qs;
  qs.mode = QueryMode::Key;
  qs.embeddings = {embed_text("dog", vocab), embed_text("boat", vocab)};
  qs.source_strings = {"dog", "boat"};
  Selection sel = match(qs, enc);
  REQUIRE(sel.count() == 2);
  CHECK(sel.boxes[0].cx == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(sel.boxes[0].w == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(sel.boxes[1].cx == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(sel.boxes[1].w == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(sel.similarities[0] > 0.8);

  // Cosine matching is invariant to positive rescaling of the query.
  QuerySet scaled = qs;
  for (auto& e : scaled.embeddings)
    for (auto& v : e) v *= 2.0;
  Selection sel2 = match(scaled, enc);
  CHECK(sel2.token_indices == sel.token_indices);

  QuerySet empty;
  CHECK_THROWS_AS(match(empty, enc), QueryError);
}

TEST_CASE("match breaks exact ties toward the lowest token index") {
  auto vocab = make_vocab();
  EncoderOutput enc;
  enc.grid_side = 2;
  enc.dim = 64;
  // Four identical class-embedding rows.
  for (int t = 0; t < 4; ++t) {
    const auto& v = vocab.vector_of("dog");
    enc.class_embeddings.insert(enc.class_embeddings.end(), v.begin(),
                                v.end());
    enc.image_tokens.insert(enc.image_tokens.end(), v.begin(), v.end());
    enc.initial_boxes.push_back(Box{0.25 + 0.5 * (t % 2), 0.25, 0.2, 0.2});
    enc.is_background.push_back(0);
  }
  QuerySet qs;
  qs.mode = QueryMode::Main;
  qs.embeddings = {vocab.vector_of("dog")};
  qs.source_strings = {"dog"};
  CHECK(match(qs, enc).token_indices[0] == 0);
}

TEST_CASE("build_text_queries modes") {
  auto vocab = make_vocab();
  std::string text = "a woman and three dogs on the boat";

  auto both = build_text_queries(QueryMode::Both, text, kLexicon, vocab);
  CHECK(both.count() == 4);  // full text + 3 keywords
  CHECK(both.source_strings[0] == text);

  auto main_only = build_text_queries(QueryMode::Main, text, kLexicon, vocab);
  CHECK(main_only.count() == 1);

  auto key = build_text_queries(QueryMode::Key, text, kLexicon, vocab);
  CHECK(key.count() == 3);

  // A single-concept text dedupes: full text embedding == keyword embedding.
  auto single = build_text_queries(QueryMode::Both, "dog", kLexicon, vocab);
  CHECK(single.count() == 1);

  CHECK_THROWS_AS(
      build_text_queries(QueryMode::Key, "the the the", kLexicon, vocab),
      QueryError);
}

TEST_CASE("ambiguity filter drops far and under-covering entries") {
  auto vocab = make_vocab();
  auto enc = two_object_encoding(vocab);

  Selection sel;
  sel.token_indices = {0, 1};
  sel.tokens = {std::vector<double>(64, 0.0), std::vector<double>(64, 0.0)};
  sel.boxes = {Box{0.2, 0.2, 0.35, 0.35},   // inside cell, covers best_gt
               Box{0.8, 0.8, 0.35, 0.35}};  // wrong cell
  sel.similarities = {0.9, 0.95};

  Box best_gt{0.2, 0.2, 0.2, 0.2};
  Box cell{0.25, 0.25, 0.5, 0.5};  // top-left cell of a 2x2 mosaic

  Selection out = filter_training_selection(sel, best_gt, cell, enc);
  REQUIRE(out.count() == 1);
  CHECK(out.token_indices[0] == 0);
  CHECK(!out.used_fallback);

  // Covering only 40% of best_gt drops the entry (threshold is one half).
  Selection low = sel;
  low.boxes[0] = Box{0.2, 0.14, 0.2, 0.08};  // area 0.016 = 0.4 * |best_gt|
  Selection out2 = filter_training_selection(low, best_gt, cell, enc);
  CHECK(out2.used_fallback);
  REQUIRE(out2.count() == 1);
  CHECK(out2.token_indices[0] == 0);  // highest-similarity in-cell entry

  // Nothing in the cell at all: fallback to the cell's center token.
  Selection wrong;
  wrong.token_indices = {1};
  wrong.tokens = {std::vector<double>(64, 0.0)};
  wrong.boxes = {Box{0.8, 0.8, 0.35, 0.35}};
  wrong.similarities = {0.9};
  Selection out3 = filter_training_selection(wrong, best_gt, cell, enc);
  CHECK(out3.used_fallback);
  REQUIRE(out3.count() == 1);
  CHECK(out3.boxes[0] == cell);
}

TEST_CASE("stopword file matches the built-in defaults") {
  auto file = load_token_file(std::string(SOURCE_DIR) + "/data/stopwords.txt");
  CHECK(file == default_stopwords());
}
