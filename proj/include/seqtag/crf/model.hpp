#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "seqtag/corpus.hpp"
#include "seqtag/crf/lattice.hpp"
#include "seqtag/crf/lbfgs.hpp"
#include "seqtag/crf/templates.hpp"
#include "seqtag/error.hpp"
#include "seqtag/tagset.hpp"
#include "seqtag/unicode.hpp"

namespace seqtag::crf {

// ---------------------------------------------------------------------------
// Observation columns

/// How column 1 is filled: from a most-frequent-tag lexicon built on the
/// training data, or from the sentence's own tags.
enum class AuxMode { Lexicon, Gold };

inline std::string_view to_string(AuxMode m) { return m == AuxMode::Lexicon ? "lexicon" : "gold"; }

inline AuxMode aux_mode_from_string(const std::string& s) {
  if (s == "lexicon") return AuxMode::Lexicon;
  if (s == "gold") return AuxMode::Gold;
  throw Error(ErrorKind::InvalidConfig, "aux mode must be 'lexicon' or 'gold', got '" + s + "'");
}

inline constexpr const char* kNoAux = "_";

/// form -> most frequent training tag (ties go to the lexicographically smaller tag).
class AuxLexicon {
 public:
  static AuxLexicon build(const TaggedCorpus& corpus) {
    std::map<std::string, std::map<std::string, size_t>> counts;
    for (const auto& s : corpus.sentences)
      for (const auto& t : s.tokens)
        if (t.tag) counts[t.form][*t.tag]++;
    AuxLexicon lex;
    for (const auto& [form, tags] : counts) {
      const std::string* best = nullptr;
      size_t best_count = 0;
      for (const auto& [tag, c] : tags) {
        if (c > best_count) best = &tag, best_count = c;
      }
      lex.entries_.emplace(form, *best);
    }
    return lex;
  }

  void set(const std::string& form, const std::string& tag) { entries_[form] = tag; }

  std::string lookup(const std::string& form) const {
    auto it = entries_.find(form);
    return it == entries_.end() ? kNoAux : it->second;
  }

  size_t size() const { return entries_.size(); }

  /// Entries sorted by form, for stable serialization.
  std::vector<std::pair<std::string, std::string>> sorted() const {
    std::vector<std::pair<std::string, std::string>> out(entries_.begin(), entries_.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  friend bool operator==(const AuxLexicon&, const AuxLexicon&) = default;

 private:
  std::unordered_map<std::string, std::string> entries_;
};

inline constexpr size_t kColumnCount = 7;

/// [form, aux, suf3, suf4, suf5, pre2, pre3]; affixes count code points.
inline std::vector<ObservationRow> derive_columns(const Sentence& s, const AuxLexicon* lexicon) {
  std::vector<ObservationRow> rows;
  rows.reserve(s.size());
  for (const auto& tok : s.tokens) {
    ObservationRow r;
    r.reserve(kColumnCount);
    r.push_back(tok.form);
    r.push_back(lexicon ? lexicon->lookup(tok.form) : std::string(kNoAux));
    r.push_back(utf8::suffix(tok.form, 3));
    r.push_back(utf8::suffix(tok.form, 4));
    r.push_back(utf8::suffix(tok.form, 5));
    r.push_back(utf8::prefix(tok.form, 2));
    r.push_back(utf8::prefix(tok.form, 3));
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Gold-leak variant: column 1 is the token's own tag ("_" when untagged).
inline std::vector<ObservationRow> derive_columns_gold(const Sentence& s) {
  auto rows = derive_columns(s, nullptr);
  for (size_t i = 0; i < s.size(); ++i)
    if (s.tokens[i].tag) rows[i][1] = *s.tokens[i].tag;
  return rows;
}

// ---------------------------------------------------------------------------
// Feature vocabulary

class FeatureVocabulary {
 public:
  size_t size() const { return strings_.size(); }
  size_t cutoff() const { return cutoff_; }
  void set_cutoff(size_t f) { cutoff_ = f; }

  size_t add(const std::string& feature, TemplateKind kind, size_t tag_count) {
    auto [it, inserted] = index_.emplace(feature, strings_.size());
    if (!inserted) return it->second;
    strings_.push_back(feature);
    kinds_.push_back(kind);
    offsets_.push_back(weight_count_);
    weight_count_ += kind == TemplateKind::Unigram ? tag_count : tag_count * tag_count;
    return it->second;
  }

  std::optional<size_t> find(const std::string& feature) const {
    auto it = index_.find(feature);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& feature(size_t i) const { return strings_[i]; }
  TemplateKind kind(size_t i) const { return kinds_[i]; }
  size_t offset(size_t i) const { return offsets_[i]; }
  size_t weight_count() const { return weight_count_; }

  friend bool operator==(const FeatureVocabulary& a, const FeatureVocabulary& b) {
    return a.strings_ == b.strings_ && a.kinds_ == b.kinds_ && a.cutoff_ == b.cutoff_;
  }

 private:
  std::unordered_map<std::string, size_t> index_;
  std::vector<std::string> strings_;
  std::vector<TemplateKind> kinds_;
  std::vector<size_t> offsets_;
  size_t weight_count_ = 0;
  size_t cutoff_ = 1;
};

// ---------------------------------------------------------------------------
// Model

struct CrfModel {
  Tagset tags;
  std::vector<FeatureTemplate> templates;
  FeatureVocabulary vocabulary;
  AuxMode aux_mode = AuxMode::Lexicon;
  AuxLexicon lexicon;
  std::vector<double> weights;
  double c = 1.5;

  std::vector<ObservationRow> rows_for(const Sentence& s) const {
    return aux_mode == AuxMode::Lexicon ? derive_columns(s, &lexicon) : derive_columns_gold(s);
  }
};

/// Feature ids active at each position. Bigram features are only collected
/// for t >= 1 (they score the transition into t).
struct EncodedSentence {
  std::vector<std::vector<uint32_t>> unigram;
  std::vector<std::vector<uint32_t>> bigram;
  size_t size() const { return unigram.size(); }
};

inline EncodedSentence encode(const CrfModel& m, std::span<const ObservationRow> rows) {
  EncodedSentence e;
  e.unigram.resize(rows.size());
  e.bigram.resize(rows.size());
  for (size_t t = 0; t < rows.size(); ++t) {
    for (const auto& tpl : m.templates) {
      if (tpl.kind == TemplateKind::Bigram && t == 0) continue;
      auto id = m.vocabulary.find(expand_template(tpl, rows, t));
      if (!id) continue;
      (tpl.kind == TemplateKind::Unigram ? e.unigram : e.bigram)[t].push_back(static_cast<uint32_t>(*id));
    }
  }
  return e;
}

inline ChainScores chain_scores(const CrfModel& m, const EncodedSentence& e) {
  const size_t k = m.tags.size();
  ChainScores s(e.size(), k);
  for (size_t t = 0; t < e.size(); ++t) {
    for (uint32_t f : e.unigram[t]) {
      const double* w = m.weights.data() + m.vocabulary.offset(f);
      for (size_t j = 0; j < k; ++j) s.u(t, j) += w[j];
    }
    for (uint32_t f : e.bigram[t]) {
      const double* w = m.weights.data() + m.vocabulary.offset(f);
      for (size_t i = 0; i < k * k; ++i) s.pairwise[t * k * k + i] += w[i];
    }
  }
  return s;
}

/// log Z(x) by the forward algorithm.
inline double partition(const CrfModel& m, std::span<const ObservationRow> rows) {
  if (rows.empty()) throw Error(ErrorKind::EmptySentence, "cannot score an empty sentence");
  return log_partition(chain_scores(m, encode(m, rows)));
}

namespace detail {

inline void check_labels(const CrfModel& m, std::span<const size_t> y, size_t n) {
  if (y.size() != n) throw Error(ErrorKind::DimensionMismatch, "tag sequence length differs from sentence length");
  for (size_t v : y)
    if (v >= m.tags.size()) throw Error(ErrorKind::TagOutOfRange, "tag index " + std::to_string(v) + " out of range");
}

// Adds scale * (observed - expected) feature counts into grad; returns log P(y|x).
inline double accumulate_sentence(const CrfModel& m, const EncodedSentence& e, std::span<const size_t> y,
                                  std::vector<double>& grad, double scale = 1.0) {
  const size_t n = e.size(), k = m.tags.size();
  ChainScores s = chain_scores(m, e);
  ForwardBackward fb = forward_backward(s);
  auto um = unary_marginals(s, fb);
  auto pm = pairwise_marginals(s, fb);
  for (size_t t = 0; t < n; ++t) {
    for (uint32_t f : e.unigram[t]) {
      double* g = grad.data() + m.vocabulary.offset(f);
      for (size_t j = 0; j < k; ++j) g[j] -= scale * um[t * k + j];
      g[y[t]] += scale;
    }
    for (uint32_t f : e.bigram[t]) {
      double* g = grad.data() + m.vocabulary.offset(f);
      for (size_t i = 0; i < k * k; ++i) g[i] -= scale * pm[t * k * k + i];
      g[y[t - 1] * k + y[t]] += scale;
    }
  }
  return s.sequence_score(y) - fb.log_z;
}

}  // namespace detail

/// log P(y|x) = score(x, y) - log Z(x).
inline double log_likelihood(const CrfModel& m, std::span<const ObservationRow> rows, std::span<const size_t> y) {
  if (rows.empty()) throw Error(ErrorKind::EmptySentence, "cannot score an empty sentence");
  detail::check_labels(m, y, rows.size());
  ChainScores s = chain_scores(m, encode(m, rows));
  return s.sequence_score(y) - log_partition(s);
}

/// d log P(y|x) / d weights: observed minus expected feature counts.
inline std::vector<double> gradient(const CrfModel& m, std::span<const ObservationRow> rows, std::span<const size_t> y) {
  if (rows.empty()) throw Error(ErrorKind::EmptySentence, "cannot score an empty sentence");
  detail::check_labels(m, y, rows.size());
  std::vector<double> g(m.weights.size(), 0.0);
  detail::accumulate_sentence(m, encode(m, rows), y, g);
  return g;
}

inline ViterbiResult viterbi(const CrfModel& m, std::span<const ObservationRow> rows) {
  if (rows.empty()) throw Error(ErrorKind::EmptySentence, "cannot decode an empty sentence");
  return seqtag::crf::viterbi(chain_scores(m, encode(m, rows)));
}

inline std::vector<std::string> tag_sentence(const CrfModel& m, const Sentence& s) {
  auto rows = m.rows_for(s);
  auto r = viterbi(m, rows);
  std::vector<std::string> out;
  for (size_t y : r.path) out.push_back(m.tags.tag(y));
  return out;
}

inline TaggedCorpus tag_corpus(const CrfModel& m, const TaggedCorpus& corpus) {
  TaggedCorpus out;
  out.tagset_name = m.tags.name();
  out.sentences.reserve(corpus.sentences.size());
  for (const auto& s : corpus.sentences) {
    Sentence o;
    auto tags = tag_sentence(m, s);
    for (size_t i = 0; i < s.size(); ++i) o.tokens.push_back(Token{s.tokens[i].form, tags[i]});
    out.sentences.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct CrfTrainOptions {
  double c = 1.5;
  size_t cutoff = 2;
  double tol = 1e-5;
  size_t max_iter = 500;
  AuxMode aux_mode = AuxMode::Lexicon;
  size_t threads = 1;
  bool deterministic = true;
};

struct CrfTrainResult {
  CrfModel model;
  std::vector<double> trace;  // maximized objective, one entry per accepted step
  size_t iterations = 0;
  std::string stop_reason;
};

namespace detail {

struct TrainingSet {
  std::vector<EncodedSentence> sentences;
  std::vector<std::vector<size_t>> labels;
};

// Regularized negative objective: -sum log P + |w|^2 / (2c).
inline double negative_objective(const CrfModel& m, const TrainingSet& data, const std::vector<double>& w,
                                 std::vector<double>& grad, size_t threads) {
  const size_t n = data.sentences.size();
  threads = std::max<size_t>(1, std::min(threads, n));
  // Partial sums per fixed chunk, reduced in chunk order.
  std::vector<std::vector<double>> partial(threads, std::vector<double>(w.size(), 0.0));
  std::vector<double> ll(threads, 0.0);
  auto work = [&](size_t chunk) {
    const size_t lo = chunk * n / threads, hi = (chunk + 1) * n / threads;
    for (size_t i = lo; i < hi; ++i) ll[chunk] += accumulate_sentence(m, data.sentences[i], data.labels[i], partial[chunk]);
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (size_t c = 0; c < threads; ++c) pool.emplace_back(work, c);
    for (auto& t : pool) t.join();
  }
  double total_ll = 0;
  std::fill(grad.begin(), grad.end(), 0.0);
  for (size_t c = 0; c < threads; ++c) {
    total_ll += ll[c];
    for (size_t i = 0; i < grad.size(); ++i) grad[i] -= partial[c][i];
  }
  double reg = 0;
  for (size_t i = 0; i < w.size(); ++i) {
    reg += w[i] * w[i];
    grad[i] += w[i] / m.c;
  }
  return -total_ll + reg / (2 * m.c);
}

}  // namespace detail

/// Builds the vocabulary from features seen at least `cutoff` times (in
/// first-occurrence order) and fits the weights by L-BFGS.
inline CrfTrainResult train(const TaggedCorpus& corpus, const Tagset& tags, const std::vector<FeatureTemplate>& templates,
                            const CrfTrainOptions& opt = {}) {
  if (!corpus.tagged()) throw Error(ErrorKind::UntaggedCorpus, "CRF training needs a non-empty tagged corpus");
  if (!(opt.c > 0)) throw Error(ErrorKind::InvalidConfig, "c must be positive");
  CrfModel m;
  m.tags = tags;
  m.templates = templates;
  m.aux_mode = opt.aux_mode;
  m.c = opt.c;
  if (m.aux_mode == AuxMode::Lexicon) m.lexicon = AuxLexicon::build(corpus);

  std::vector<std::vector<ObservationRow>> all_rows;
  all_rows.reserve(corpus.size());
  std::unordered_map<std::string, size_t> freq;
  std::vector<std::pair<std::string, TemplateKind>> order;
  for (const auto& s : corpus.sentences) {
    all_rows.push_back(m.rows_for(s));
    const auto& rows = all_rows.back();
    for (size_t t = 0; t < rows.size(); ++t) {
      for (const auto& tpl : templates) {
        if (tpl.kind == TemplateKind::Bigram && t == 0) continue;
        auto f = expand_template(tpl, rows, t);
        if (freq[f]++ == 0) order.emplace_back(std::move(f), tpl.kind);
      }
    }
  }
  m.vocabulary.set_cutoff(opt.cutoff);
  for (const auto& [f, kind] : order)
    if (freq[f] >= opt.cutoff) m.vocabulary.add(f, kind, tags.size());
  if (m.vocabulary.size() == 0) {
    throw Error(ErrorKind::EmptyVocabulary, "no feature occurs at least " + std::to_string(opt.cutoff) + " times");
  }

  detail::TrainingSet data;
  for (size_t i = 0; i < corpus.size(); ++i) {
    data.sentences.push_back(encode(m, all_rows[i]));
    std::vector<size_t> y;
    for (const auto& t : corpus.sentences[i].tokens) y.push_back(tags.index(*t.tag));
    data.labels.push_back(std::move(y));
  }

  m.weights.assign(m.vocabulary.weight_count(), 0.0);
  const size_t threads = opt.deterministic ? 1 : std::max<size_t>(1, opt.threads);
  auto objective = [&](const std::vector<double>& w, std::vector<double>& g) {
    m.weights = w;
    double v = detail::negative_objective(m, data, w, g, threads);
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "CRF objective became non-finite");
    return v;
  };
  LbfgsOptions lo;
  lo.tol = opt.tol;
  lo.max_iter = opt.max_iter;
  auto res = minimize_lbfgs(objective, m.weights, lo);
  m.weights = res.x;

  CrfTrainResult out;
  out.model = std::move(m);
  out.iterations = res.iterations;
  out.stop_reason = res.stop_reason;
  for (double v : res.trace) out.trace.push_back(-v);
  return out;
}

/// Regularized objective sum log P(y|x) - |w|^2/(2c) of the current weights.
inline double objective(const CrfModel& m, const TaggedCorpus& corpus) {
  double total = 0;
  for (const auto& s : corpus.sentences) {
    auto rows = m.rows_for(s);
    std::vector<size_t> y;
    for (const auto& t : s.tokens) y.push_back(m.tags.index(*t.tag));
    total += log_likelihood(m, rows, y);
  }
  double reg = 0;
  for (double w : m.weights) reg += w * w;
  return total - reg / (2 * m.c);
}

// ---------------------------------------------------------------------------
// Model file
//
//   SEQTAG-CRF <version>
//   c <hexfloat>
//   cutoff <f>
//   aux <lexicon|gold>
//   tagset <name> <K>        followed by K tag lines
//   templates <T>            followed by T template lines
//   lexicon <L>              followed by L "form<TAB>tag" lines
//   features <V>             followed by V "U|B<TAB>feature" lines
//   weights <W>              followed by W hexfloat lines

inline constexpr const char* kCrfMagic = "SEQTAG-CRF";
inline constexpr int kCrfFormatVersion = 1;

inline void save_model(std::ostream& out, const CrfModel& m) {
  out << kCrfMagic << ' ' << kCrfFormatVersion << '\n';
  out << std::hexfloat;
  out << "c " << m.c << '\n';
  out << "cutoff " << m.vocabulary.cutoff() << '\n';
  out << "aux " << to_string(m.aux_mode) << '\n';
  out << "tagset " << m.tags.name() << ' ' << m.tags.size() << '\n';
  for (const auto& t : m.tags.tags()) out << t << '\n';
  out << "templates " << m.templates.size() << '\n';
  for (const auto& t : m.templates) out << t.text() << '\n';
  auto lex = m.lexicon.sorted();
  out << "lexicon " << lex.size() << '\n';
  for (const auto& [form, tag] : lex) out << form << '\t' << tag << '\n';
  out << "features " << m.vocabulary.size() << '\n';
  for (size_t i = 0; i < m.vocabulary.size(); ++i)
    out << (m.vocabulary.kind(i) == TemplateKind::Unigram ? 'U' : 'B') << '\t' << m.vocabulary.feature(i) << '\n';
  out << "weights " << m.weights.size() << '\n';
  for (double w : m.weights) out << w << '\n';
  out << std::defaultfloat;
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::string next() {
    std::string line;
    if (!std::getline(in_, line)) throw Error(ErrorKind::BadModelFile, "unexpected end of model file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  // "<key> <value...>" -> value
  std::string expect(const std::string& key) {
    std::string line = next();
    if (line.compare(0, key.size() + 1, key + " ") != 0) {
      throw Error(ErrorKind::BadModelFile, "expected '" + key + "' record, got '" + line + "'");
    }
    return line.substr(key.size() + 1);
  }

  size_t expect_count(const std::string& key) {
    auto v = expect(key);
    try {
      return std::stoul(v);
    } catch (const std::exception&) {
      throw Error(ErrorKind::BadModelFile, "bad count for '" + key + "'");
    }
  }

 private:
  std::istream& in_;
};

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw Error(ErrorKind::BadModelFile, "bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline CrfModel load_model(std::istream& in) {
  detail::LineReader r(in);
  auto header = r.next();
  if (header.rfind(kCrfMagic, 0) != 0) throw Error(ErrorKind::BadModelFile, "not a CRF model (missing SEQTAG-CRF magic)");
  int version = std::atoi(header.c_str() + std::string(kCrfMagic).size());
  if (version != kCrfFormatVersion) throw Error(ErrorKind::BadModelFile, "unsupported CRF format version " + std::to_string(version));
  CrfModel m;
  m.c = detail::parse_double(r.expect("c"));
  size_t cutoff = r.expect_count("cutoff");
  m.aux_mode = aux_mode_from_string(r.expect("aux"));
  auto ts = r.expect("tagset");
  auto sp = ts.rfind(' ');
  if (sp == std::string::npos) throw Error(ErrorKind::BadModelFile, "bad tagset record");
  std::string tname = ts.substr(0, sp);
  size_t k = std::stoul(ts.substr(sp + 1));
  std::vector<std::string> tags;
  for (size_t i = 0; i < k; ++i) tags.push_back(r.next());
  m.tags = Tagset(tname, std::move(tags));
  size_t nt = r.expect_count("templates");
  std::string tpl_text;
  for (size_t i = 0; i < nt; ++i) tpl_text += r.next() + "\n";
  m.templates = parse_templates(tpl_text);
  size_t nl = r.expect_count("lexicon");
  for (size_t i = 0; i < nl; ++i) {
    auto line = r.next();
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(ErrorKind::BadModelFile, "bad lexicon line");
    m.lexicon.set(line.substr(0, tab), line.substr(tab + 1));
  }
  size_t nf = r.expect_count("features");
  m.vocabulary.set_cutoff(cutoff);
  for (size_t i = 0; i < nf; ++i) {
    auto line = r.next();
    if (line.size() < 2 || line[1] != '\t' || (line[0] != 'U' && line[0] != 'B')) {
      throw Error(ErrorKind::BadModelFile, "bad feature line");
    }
    m.vocabulary.add(line.substr(2), line[0] == 'U' ? TemplateKind::Unigram : TemplateKind::Bigram, k);
  }
  size_t nw = r.expect_count("weights");
  if (nw != m.vocabulary.weight_count()) throw Error(ErrorKind::BadModelFile, "weight count does not match vocabulary");
  m.weights.resize(nw);
  for (size_t i = 0; i < nw; ++i) m.weights[i] = detail::parse_double(r.next());
  return m;
}

inline void save_model(const std::string& path, const CrfModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write model " + path);
  save_model(out, m);
}

inline CrfModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open model " + path);
  return load_model(in);
}

}  // namespace seqtag::crf
