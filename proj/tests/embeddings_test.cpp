#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "seqtag/embeddings.hpp"
#include "support.hpp"

using namespace seqtag;
using namespace seqtag::emb;

namespace {

ErrorKind kind_of_load(const std::string& text) {
  std::istringstream in(text);
  try {
    load_text_vectors(in);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Usage;
}

WordVectorTable small_table() {
  std::istringstream in("3 2\na 1 0\nb 1 0\nc 0 1\n");
  return load_text_vectors(in);
}

}  // namespace

TEST(TextVectors, LoadsDeclaredShape) {
  std::istringstream in("2 3\nx 0.5 -1 2\ny 1e-3 0 0\n");
  auto t = load_text_vectors(in);
  EXPECT_EQ(t.dim(), 3u);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.row(*t.find("x"))[1], -1.0);
  EXPECT_EQ(t.row(*t.find("y"))[0], 1e-3);
}

TEST(TextVectors, Errors) {
  EXPECT_EQ(kind_of_load("2 3\nx 1 2 3\n"), ErrorKind::CountMismatch);
  EXPECT_EQ(kind_of_load("1 3\nx 1 2\n"), ErrorKind::CountMismatch);
  EXPECT_EQ(kind_of_load("2 3\nx 1 2 3\nx 4 5 6\n"), ErrorKind::DuplicateWord);
  EXPECT_EQ(kind_of_load("1 2\nx 1 abc\n"), ErrorKind::NonNumeric);
  EXPECT_EQ(kind_of_load("two 2\n"), ErrorKind::NonNumeric);
}

TEST(TextVectors, RoundTripIsByteIdentical) {
  Rng rng(3);
  WordVectorTable t(4);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> v(4);
    for (auto& x : v) x = rng.uniform(-5, 5) * std::pow(10.0, double(rng.below(9)) - 4);
    t.add("w" + std::to_string(i), v);
  }
  std::ostringstream first;
  save_text_vectors(first, t);
  std::istringstream in(first.str());
  auto back = load_text_vectors(in);
  std::ostringstream second;
  save_text_vectors(second, back);
  EXPECT_EQ(first.str(), second.str());
  for (size_t i = 0; i < t.size(); ++i)
    for (size_t d = 0; d < 4; ++d) EXPECT_LT(seqtag::testing::rel_error(back.row(i)[d], t.row(i)[d]), 1e-8);
}

TEST(BinaryVectors, RoundTripIsExact) {
  auto res = train_skipgram({{"ab", "cd", "ab"}, {"cd", "ef"}}, [] {
    SkipgramConfig c;
    c.dim = 5;
    c.subwords.buckets = 50;
    c.epochs = 2;
    return c;
  }());
  std::stringstream ss;
  save_binary_vectors(ss, res.table);
  auto back = load_binary_vectors(ss);
  EXPECT_TRUE(back == res.table);
  EXPECT_TRUE(back.has_subwords());
  EXPECT_EQ(oov_vector(back, "abcd"), oov_vector(res.table, "abcd"));
}

TEST(Subwords, NgramsOfShortWord) {
  EXPECT_EQ(char_ngrams("w", 3, 6), (std::vector<std::string>{"<w>"}));
  auto g = char_ngrams("ab", 3, 6);
  EXPECT_EQ(g, (std::vector<std::string>{"<ab", "ab>", "<ab>"}));
  auto odia = char_ngrams("ଘର", 3, 3);
  ASSERT_EQ(odia.size(), 2u);
  EXPECT_EQ(odia[0], "<ଘର");
}

TEST(Subwords, OovVector) {
  WordVectorTable t(2);
  t.add("known", std::vector<double>{7, 8});
  SubwordConfig cfg;
  cfg.buckets = 7;
  std::vector<double> b(14);
  for (size_t i = 0; i < b.size(); ++i) b[i] = double(i);
  t.set_subwords(cfg, b);
  EXPECT_EQ(oov_vector(t, "known"), (std::vector<double>{7, 8}));

  // "x" has the single n-gram "<x>".
  size_t id = utf8::fnv1a64("<x>") % 7;
  EXPECT_EQ(oov_vector(t, "x"), (std::vector<double>{b[2 * id], b[2 * id + 1]}));

  auto ids = ngram_buckets("xyz", cfg);
  std::vector<double> mean(2, 0.0);
  for (size_t i : ids) mean[0] += b[2 * i], mean[1] += b[2 * i + 1];
  mean[0] /= ids.size(), mean[1] /= ids.size();
  auto v = oov_vector(t, "xyz");
  EXPECT_NEAR(v[0], mean[0], 1e-12);
  EXPECT_NEAR(v[1], mean[1], 1e-12);
  EXPECT_EQ(oov_vector(t, "xyz"), v);
}

TEST(Subwords, NoNgramsGiveZero) {
  WordVectorTable t(2);
  SubwordConfig cfg;
  cfg.min_n = 5;
  cfg.max_n = 6;
  cfg.buckets = 3;
  t.set_subwords(cfg, std::vector<double>(6, 1.0));
  EXPECT_EQ(oov_vector(t, "a"), (std::vector<double>{0, 0}));
}

TEST(Subwords, TableWithoutBuckets) {
  auto t = small_table();
  try {
    oov_vector(t, "zzz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoSubwords);
  }
}

TEST(Neighbors, CosineRules) {
  auto t = small_table();
  auto n = nearest_neighbors(t, "a", 5);
  ASSERT_EQ(n.size(), 2u);
  EXPECT_EQ(n[0].word, "b");
  EXPECT_DOUBLE_EQ(n[0].cosine, 1.0);
  EXPECT_EQ(n[1].word, "c");
  EXPECT_EQ(n[1].cosine, 0.0);
  EXPECT_EQ(nearest_neighbors(t, "a", 1).size(), 1u);
  WordVectorTable empty(2);
  EXPECT_THROW(nearest_neighbors(empty, "a", 1), Error);
  EXPECT_THROW(nearest_neighbors(t, "q", 1), Error);
}

TEST(Skipgram, Defaults) {
  SkipgramConfig c;
  EXPECT_EQ(c.dim, 200u);
  EXPECT_EQ(c.window, 5u);
  EXPECT_EQ(c.subwords.min_n, 3u);
  EXPECT_EQ(c.subwords.max_n, 6u);
}

TEST(Skipgram, LossDecreasesOnAlternatingCorpus) {
  std::vector<std::vector<std::string>> corpus;
  for (int s = 0; s < 20; ++s) {
    std::vector<std::string> sent;
    for (int i = 0; i < 10; ++i) sent.push_back(i % 2 ? "b" : "a");
    corpus.push_back(sent);
  }
  SkipgramConfig c;
  c.dim = 10;
  c.window = 1;
  c.subwords.buckets = 100;
  auto res = train_skipgram(corpus, c);
  ASSERT_EQ(res.epoch_loss.size(), 5u);
  for (double l : res.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  EXPECT_LT(res.epoch_loss.back(), res.epoch_loss.front());
  EXPECT_EQ(res.table.size(), 2u);
  EXPECT_EQ(res.table.dim(), 10u);
}

TEST(Skipgram, MinCountAboveAllFrequencies) {
  SkipgramConfig c;
  c.min_count = 10;
  try {
    train_skipgram({{"a", "b", "a"}}, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyVocabulary);
  }
}

TEST(Skipgram, Deterministic) {
  SkipgramConfig c;
  c.dim = 6;
  c.subwords.buckets = 30;
  std::vector<std::vector<std::string>> corpus = {{"ଘର", "ଦ୍ୱାର", "ଘର"}, {"ପାଣି", "ଘର"}};
  EXPECT_TRUE(train_skipgram(corpus, c).table == train_skipgram(corpus, c).table);
}

TEST(Skipgram, PairGradientMatchesFiniteDifferences) {
  Rng rng(9);
  const size_t dim = 5, outs = 4;
  std::vector<double> h(dim);
  std::vector<std::vector<double>> o(outs, std::vector<double>(dim));
  for (auto& x : h) x = rng.uniform(-1, 1);
  for (auto& r : o)
    for (auto& x : r) x = rng.uniform(-1, 1);
  auto loss = [&] {
    std::vector<std::span<const double>> spans(o.begin(), o.end());
    std::vector<double> gh(dim);
    return emb::detail::sgns_pair(h, spans, gh, nullptr);
  };
  std::vector<std::span<const double>> spans(o.begin(), o.end());
  std::vector<double> gh(dim, 0.0);
  std::vector<std::vector<double>> go(outs, std::vector<double>(dim, 0.0));
  emb::detail::sgns_pair(h, spans, gh, &go);
  const double eps = 1e-5;
  for (size_t d = 0; d < dim; ++d) {
    double keep = h[d];
    h[d] = keep + eps;
    double up = loss();
    h[d] = keep - eps;
    double down = loss();
    h[d] = keep;
    EXPECT_LT(seqtag::testing::rel_error(gh[d], (up - down) / (2 * eps), 1e-8), 1e-4);
  }
  for (size_t r = 0; r < outs; ++r)
    for (size_t d = 0; d < dim; ++d) {
      double keep = o[r][d];
      o[r][d] = keep + eps;
      double up = loss();
      o[r][d] = keep - eps;
      double down = loss();
      o[r][d] = keep;
      EXPECT_LT(seqtag::testing::rel_error(go[r][d], (up - down) / (2 * eps), 1e-8), 1e-4);
    }
}
