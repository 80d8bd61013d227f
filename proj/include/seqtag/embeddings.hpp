#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqtag/error.hpp"
#include "seqtag/random.hpp"
#include "seqtag/unicode.hpp"

namespace seqtag::emb {

struct SubwordConfig {
  size_t min_n = 3;
  size_t max_n = 6;
  size_t buckets = 10000;
  friend bool operator==(const SubwordConfig&, const SubwordConfig&) = default;
};

/// Character n-grams of "<word>" over code points, for n in [min_n, max_n].
inline std::vector<std::string> char_ngrams(const std::string& word, size_t min_n, size_t max_n) {
  std::u32string padded = U"<" + utf8::decode(word) + U">";
  std::vector<std::string> out;
  for (size_t n = min_n; n <= max_n && n <= padded.size(); ++n)
    for (size_t i = 0; i + n <= padded.size(); ++i) out.push_back(utf8::encode(padded.substr(i, n)));
  return out;
}

inline std::vector<size_t> ngram_buckets(const std::string& word, const SubwordConfig& cfg) {
  std::vector<size_t> out;
  for (const auto& g : char_ngrams(word, cfg.min_n, cfg.max_n)) out.push_back(utf8::fnv1a64(g) % cfg.buckets);
  return out;
}

class WordVectorTable {
 public:
  WordVectorTable() = default;
  explicit WordVectorTable(size_t dim) : dim_(dim) {
    if (dim == 0) throw Error(ErrorKind::DimensionMismatch, "vector dimension must be positive");
  }

  size_t dim() const { return dim_; }
  size_t size() const { return words_.size(); }
  bool empty() const { return words_.empty(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(size_t i) const { return words_[i]; }

  size_t add(const std::string& word, std::span<const double> v) {
    if (v.size() != dim_) throw Error(ErrorKind::DimensionMismatch, "vector for '" + word + "' has wrong dimension");
    auto [it, inserted] = index_.emplace(word, words_.size());
    if (!inserted) throw Error(ErrorKind::DuplicateWord, "word '" + word + "' appears twice");
    words_.push_back(word);
    matrix_.insert(matrix_.end(), v.begin(), v.end());
    return it->second;
  }

  std::optional<size_t> find(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  std::span<const double> row(size_t i) const { return {matrix_.data() + i * dim_, dim_}; }
  std::span<double> row(size_t i) { return {matrix_.data() + i * dim_, dim_}; }

  bool has_subwords() const { return subword_.has_value(); }
  const SubwordConfig& subword_config() const {
    if (!subword_) throw Error(ErrorKind::NoSubwords, "vector table has no subword information");
    return *subword_;
  }
  std::span<const double> bucket(size_t b) const { return {buckets_.data() + b * dim_, dim_}; }
  std::span<double> bucket(size_t b) { return {buckets_.data() + b * dim_, dim_}; }

  void set_subwords(const SubwordConfig& cfg, std::vector<double> buckets) {
    if (buckets.size() != cfg.buckets * dim_) throw Error(ErrorKind::DimensionMismatch, "bucket matrix has wrong size");
    subword_ = cfg;
    buckets_ = std::move(buckets);
  }

  const std::vector<double>& matrix() const { return matrix_; }
  const std::vector<double>& bucket_matrix() const { return buckets_; }

  friend bool operator==(const WordVectorTable& a, const WordVectorTable& b) {
    return a.dim_ == b.dim_ && a.words_ == b.words_ && a.matrix_ == b.matrix_ && a.subword_ == b.subword_ &&
           a.buckets_ == b.buckets_;
  }

 private:
  size_t dim_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, size_t> index_;
  std::vector<double> matrix_;
  std::optional<SubwordConfig> subword_;
  std::vector<double> buckets_;
};

/// Stored row for in-vocabulary words, otherwise the mean of the word's
/// n-gram bucket vectors (zero when it has none).
inline std::vector<double> oov_vector(const WordVectorTable& table, const std::string& word) {
  if (auto i = table.find(word)) {
    auto r = table.row(*i);
    return {r.begin(), r.end()};
  }
  const auto& cfg = table.subword_config();
  std::vector<double> v(table.dim(), 0.0);
  auto ids = ngram_buckets(word, cfg);
  if (ids.empty()) return v;
  for (size_t b : ids) {
    auto bv = table.bucket(b);
    for (size_t d = 0; d < v.size(); ++d) v[d] += bv[d];
  }
  for (double& x : v) x /= static_cast<double>(ids.size());
  return v;
}

/// Stored row, or subword composition, or nothing.
inline std::optional<std::vector<double>> lookup(const WordVectorTable& table, const std::string& word) {
  if (table.contains(word) || table.has_subwords()) return oov_vector(table, word);
  return std::nullopt;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

struct Neighbor {
  std::string word;
  double cosine = 0;
};

/// The k most similar vocabulary words by cosine, excluding the query.
inline std::vector<Neighbor> nearest_neighbors(const WordVectorTable& table, const std::string& word, size_t k) {
  if (table.empty()) throw Error(ErrorKind::EmptyTable, "vector table is empty");
  auto q = lookup(table, word);
  if (!q) throw Error(ErrorKind::UnknownWord, "'" + word + "' is not in the table and has no subwords");
  std::vector<Neighbor> all;
  for (size_t i = 0; i < table.size(); ++i) {
    if (table.word(i) == word) continue;
    all.push_back({table.word(i), cosine(*q, table.row(i))});
  }
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.cosine > b.cosine; });
  if (all.size() > k) all.resize(k);
  return all;
}

// ---------------------------------------------------------------------------
// Text format: "<count> <dim>" then "word v1 ... v_dim" per line.

inline std::string format_component(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void save_text_vectors(std::ostream& out, const WordVectorTable& t) {
  out << t.size() << ' ' << t.dim() << '\n';
  for (size_t i = 0; i < t.size(); ++i) {
    out << t.word(i);
    for (double v : t.row(i)) out << ' ' << format_component(v);
    out << '\n';
  }
}

inline WordVectorTable load_text_vectors(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next()) throw Error(ErrorKind::CountMismatch, source + ": missing header");
  std::istringstream hs(line);
  long long count = -1, dim = -1;
  std::string extra;
  if (!(hs >> count >> dim) || (hs >> extra) || count < 0 || dim <= 0) {
    throw Error(ErrorKind::NonNumeric, source + ": header must be '<count> <dim>'");
  }
  WordVectorTable t(static_cast<size_t>(dim));
  std::vector<double> v(t.dim());
  while (next()) {
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    std::vector<std::string> fields;
    for (std::string f; ls >> f;) fields.push_back(f);
    if (fields.size() != t.dim()) {
      throw Error(ErrorKind::CountMismatch, source + ":" + std::to_string(lineno) + ": expected " +
                                                std::to_string(t.dim()) + " components, found " +
                                                std::to_string(fields.size()));
    }
    for (size_t d = 0; d < t.dim(); ++d) {
      char* end = nullptr;
      v[d] = std::strtod(fields[d].c_str(), &end);
      if (end != fields[d].c_str() + fields[d].size() || !std::isfinite(v[d])) {
        throw Error(ErrorKind::NonNumeric, source + ":" + std::to_string(lineno) + ": bad component '" + fields[d] + "'");
      }
    }
    t.add(word, v);
  }
  if (t.size() != static_cast<size_t>(count)) {
    throw Error(ErrorKind::CountMismatch, source + ": header declares " + std::to_string(count) + " words, found " +
                                              std::to_string(t.size()));
  }
  return t;
}

inline WordVectorTable load_text_vectors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return load_text_vectors(in, path);
}

inline void save_text_vectors(const std::string& path, const WordVectorTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  save_text_vectors(out, t);
}

// ---------------------------------------------------------------------------
// Binary format (keeps subword buckets):
//   "SEQTAG-VEC 1\n", then little-endian u64 fields and IEEE doubles.

inline constexpr const char* kVecMagic = "SEQTAG-VEC 1\n";

namespace detail {

inline void put_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error(ErrorKind::BadModelFile, "truncated vector file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_doubles(std::ostream& out, std::span<const double> xs) {
  for (double x : xs) put_u64(out, std::bit_cast<uint64_t>(x));
}

inline void get_doubles(std::istream& in, std::span<double> xs) {
  for (double& x : xs) x = std::bit_cast<double>(get_u64(in));
}

}  // namespace detail

inline void save_binary_vectors(std::ostream& out, const WordVectorTable& t) {
  out << kVecMagic;
  detail::put_u64(out, t.size());
  detail::put_u64(out, t.dim());
  for (size_t i = 0; i < t.size(); ++i) {
    detail::put_u64(out, t.word(i).size());
    out.write(t.word(i).data(), static_cast<std::streamsize>(t.word(i).size()));
    detail::put_doubles(out, t.row(i));
  }
  detail::put_u64(out, t.has_subwords() ? 1 : 0);
  if (t.has_subwords()) {
    const auto& c = t.subword_config();
    detail::put_u64(out, c.min_n);
    detail::put_u64(out, c.max_n);
    detail::put_u64(out, c.buckets);
    detail::put_doubles(out, t.bucket_matrix());
  }
}

inline WordVectorTable load_binary_vectors(std::istream& in) {
  std::string magic(std::strlen(kVecMagic), '\0');
  if (!in.read(magic.data(), static_cast<std::streamsize>(magic.size())) || magic != kVecMagic) {
    throw Error(ErrorKind::BadModelFile, "not a SEQTAG-VEC file");
  }
  size_t n = detail::get_u64(in), dim = detail::get_u64(in);
  WordVectorTable t(dim);
  std::vector<double> v(dim);
  for (size_t i = 0; i < n; ++i) {
    size_t len = detail::get_u64(in);
    std::string w(len, '\0');
    if (!in.read(w.data(), static_cast<std::streamsize>(len))) throw Error(ErrorKind::BadModelFile, "truncated vector file");
    detail::get_doubles(in, v);
    t.add(w, v);
  }
  if (detail::get_u64(in)) {
    SubwordConfig c;
    c.min_n = detail::get_u64(in);
    c.max_n = detail::get_u64(in);
    c.buckets = detail::get_u64(in);
    std::vector<double> b(c.buckets * dim);
    detail::get_doubles(in, b);
    t.set_subwords(c, std::move(b));
  }
  return t;
}

inline void save_binary_vectors(const std::string& path, const WordVectorTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  save_binary_vectors(out, t);
}

inline WordVectorTable load_binary_vectors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return load_binary_vectors(in);
}

/// Picks the format from the file's first bytes.
inline WordVectorTable load_vectors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::string head(std::strlen(kVecMagic), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  return head == kVecMagic ? load_binary_vectors(path) : load_text_vectors(path);
}

// ---------------------------------------------------------------------------
// Skip-gram with negative sampling over word + n-gram input vectors.

struct SkipgramConfig {
  size_t dim = 200;
  size_t window = 5;
  size_t negatives = 5;
  size_t epochs = 5;
  double learning_rate = 0.05;
  size_t min_count = 1;
  SubwordConfig subwords;
  uint64_t seed = 1;

  void validate() const {
    if (dim == 0 || window == 0 || negatives == 0 || epochs == 0 || !(learning_rate > 0) || subwords.buckets == 0 ||
        subwords.min_n == 0 || subwords.min_n > subwords.max_n) {
      throw Error(ErrorKind::InvalidConfig, "skip-gram config needs positive dim, window, negatives, epochs, rate");
    }
  }
};

struct SkipgramResult {
  WordVectorTable table;
  std::vector<double> epoch_loss;  // mean loss per (center, context) pair
};

namespace detail {

/// Loss -log s(h.u_pos) - sum log s(-h.u_neg) for one pair; adds its
/// gradients into grad_h and grad_out (one row per output, positive first).
inline double sgns_pair(std::span<const double> h, const std::vector<std::span<const double>>& outputs,
                        std::span<double> grad_h, std::vector<std::vector<double>>* grad_out) {
  double loss = 0;
  const size_t dim = h.size();
  for (size_t o = 0; o < outputs.size(); ++o) {
    double score = 0;
    for (size_t d = 0; d < dim; ++d) score += h[d] * outputs[o][d];
    double label = o == 0 ? 1.0 : 0.0;
    // log(1 + exp(-z)) for z = +/- score, computed stably.
    double z = o == 0 ? score : -score;
    loss += z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
    double sig = 1.0 / (1.0 + std::exp(-score));
    double g = sig - label;  // d loss / d score
    for (size_t d = 0; d < dim; ++d) grad_h[d] += g * outputs[o][d];
    if (grad_out)
      for (size_t d = 0; d < dim; ++d) (*grad_out)[o][d] += g * h[d];
  }
  return loss;
}

}  // namespace detail

inline SkipgramResult train_skipgram(const std::vector<std::vector<std::string>>& sentences, const SkipgramConfig& cfg) {
  cfg.validate();
  std::unordered_map<std::string, size_t> counts;
  std::vector<std::string> order;
  for (const auto& s : sentences)
    for (const auto& w : s)
      if (counts[w]++ == 0) order.push_back(w);
  if (order.empty()) throw Error(ErrorKind::EmptyCorpus, "no sentences to train on");

  std::vector<std::string> vocab;
  std::unordered_map<std::string, size_t> id;
  for (const auto& w : order)
    if (counts[w] >= cfg.min_count) id.emplace(w, vocab.size()), vocab.push_back(w);
  if (vocab.empty()) throw Error(ErrorKind::EmptyVocabulary, "no word occurs at least " + std::to_string(cfg.min_count) + " times");

  const size_t dim = cfg.dim, v = vocab.size(), nb = cfg.subwords.buckets;
  Rng rng(cfg.seed);
  std::vector<double> in_words(v * dim), in_buckets(nb * dim), out(v * dim, 0.0);
  for (auto& x : in_words) x = rng.uniform(-1.0, 1.0) / static_cast<double>(dim);
  for (auto& x : in_buckets) x = rng.uniform(-1.0, 1.0) / static_cast<double>(dim);

  std::vector<std::vector<size_t>> subword_ids(v);
  for (size_t i = 0; i < v; ++i) subword_ids[i] = ngram_buckets(vocab[i], cfg.subwords);

  // Negative sampling distribution: unigram counts raised to 0.75.
  std::vector<double> cumulative(v);
  double acc = 0;
  for (size_t i = 0; i < v; ++i) cumulative[i] = acc += std::pow(static_cast<double>(counts[vocab[i]]), 0.75);
  auto draw_negative = [&] {
    double r = rng.uniform() * acc;
    return static_cast<size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin());
  };

  std::vector<std::vector<size_t>> corpus;
  size_t total_tokens = 0;
  for (const auto& s : sentences) {
    std::vector<size_t> ids;
    for (const auto& w : s)
      if (auto it = id.find(w); it != id.end()) ids.push_back(it->second);
    total_tokens += ids.size();
    corpus.push_back(std::move(ids));
  }

  SkipgramResult res;
  std::vector<double> h(dim), grad_h(dim);
  std::vector<std::span<const double>> outputs;
  std::vector<size_t> targets;
  std::vector<std::vector<double>> grad_out(cfg.negatives + 1, std::vector<double>(dim));
  const double planned = static_cast<double>(cfg.epochs * total_tokens);
  size_t processed = 0;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss = 0;
    size_t pairs = 0;
    for (const auto& sent : corpus) {
      for (size_t t = 0; t < sent.size(); ++t, ++processed) {
        double lr = cfg.learning_rate * std::max(0.0, 1.0 - static_cast<double>(processed) / planned);
        size_t center = sent[t];
        const auto& subs = subword_ids[center];
        std::fill(h.begin(), h.end(), 0.0);
        for (size_t d = 0; d < dim; ++d) h[d] = in_words[center * dim + d];
        for (size_t b : subs)
          for (size_t d = 0; d < dim; ++d) h[d] += in_buckets[b * dim + d];
        size_t reach = 1 + rng.below(cfg.window);
        size_t lo = t >= reach ? t - reach : 0, hi = std::min(sent.size() - 1, t + reach);
        for (size_t c = lo; c <= hi; ++c) {
          if (c == t) continue;
          targets.assign(1, sent[c]);
          for (size_t k = 0; k < cfg.negatives; ++k) {
            size_t neg = draw_negative();
            if (neg != sent[c]) targets.push_back(neg);
          }
          outputs.clear();
          for (size_t o : targets) outputs.emplace_back(out.data() + o * dim, dim);
          std::fill(grad_h.begin(), grad_h.end(), 0.0);
          for (size_t o = 0; o < targets.size(); ++o) std::fill(grad_out[o].begin(), grad_out[o].end(), 0.0);
          loss += detail::sgns_pair(h, outputs, grad_h, &grad_out);
          ++pairs;
          for (size_t o = 0; o < targets.size(); ++o)
            for (size_t d = 0; d < dim; ++d) out[targets[o] * dim + d] -= lr * grad_out[o][d];
          for (size_t d = 0; d < dim; ++d) {
            in_words[center * dim + d] -= lr * grad_h[d];
            h[d] -= lr * grad_h[d] * static_cast<double>(1 + subs.size());
          }
          for (size_t b : subs)
            for (size_t d = 0; d < dim; ++d) in_buckets[b * dim + d] -= lr * grad_h[d];
        }
      }
    }
    double mean = pairs ? loss / static_cast<double>(pairs) : 0.0;
    if (!std::isfinite(mean)) throw Error(ErrorKind::NonFinite, "skip-gram loss became non-finite in epoch " + std::to_string(epoch + 1));
    res.epoch_loss.push_back(mean);
  }

  // Exported rows average the word vector with its n-gram vectors, which
  // keeps them on the same scale as composed out-of-vocabulary vectors.
  res.table = WordVectorTable(dim);
  std::vector<double> row(dim);
  for (size_t i = 0; i < v; ++i) {
    for (size_t d = 0; d < dim; ++d) row[d] = in_words[i * dim + d];
    for (size_t b : subword_ids[i])
      for (size_t d = 0; d < dim; ++d) row[d] += in_buckets[b * dim + d];
    for (double& x : row) x /= static_cast<double>(1 + subword_ids[i].size());
    res.table.add(vocab[i], row);
  }
  res.table.set_subwords(cfg.subwords, std::move(in_buckets));
  return res;
}

}  // namespace seqtag::emb
