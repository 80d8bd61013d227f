#pragma once

// Shared helpers for the test binaries: corpus literals, temp files, random
// CRF instances and the exhaustive-enumeration oracle.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "seqtag/corpus.hpp"
#include "seqtag/crf/model.hpp"
#include "seqtag/random.hpp"

namespace seqtag::testing {

/// "a/NOUN b/VERB | c/NOUN" -> two sentences. Tokens without '/' are untagged.
inline TaggedCorpus corpus_from(const std::string& spec, const std::string& tagset_name = "UD") {
  TaggedCorpus c;
  c.tagset_name = tagset_name;
  Sentence cur;
  std::istringstream in(spec);
  std::string item;
  while (in >> item) {
    if (item == "|") {
      if (!cur.empty()) c.sentences.push_back(std::move(cur));
      cur = Sentence{};
      continue;
    }
    auto slash = item.rfind('/');
    if (slash == std::string::npos) {
      cur.tokens.push_back(Token{item, std::nullopt});
    } else {
      cur.tokens.push_back(Token{item.substr(0, slash), item.substr(slash + 1)});
    }
  }
  if (!cur.empty()) c.sentences.push_back(std::move(cur));
  return c;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("seqtag_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

  std::string write(const std::string& name, const std::string& content) const {
    auto p = file(name);
    std::ofstream(p, std::ios::binary) << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Components smaller than this are compared in absolute terms: central
/// differences at h = 1e-5 carry roughly 1e-10 of rounding noise.
inline constexpr double kCrfGradientFloor = 1e-4;

inline double rel_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// ---------------------------------------------------------------------------
// Random CRF instances

struct CrfInstance {
  crf::CrfModel model;
  std::vector<crf::ObservationRow> rows;
  std::vector<size_t> gold;
};

/// A random sentence of n words over a small alphabet, K tags, a handful of
/// templates, every expanded feature in the vocabulary, and weights drawn
/// uniformly from [-scale, scale].
inline CrfInstance random_crf_instance(Rng& rng, size_t n, size_t k, double scale = 2.0) {
  CrfInstance inst;
  std::vector<std::string> tags;
  for (size_t i = 0; i < k; ++i) tags.push_back("T" + std::to_string(i));
  inst.model.tags = Tagset("toy", tags);
  inst.model.templates = crf::parse_templates(
      "U00:%x[0,0]\n"
      "U01:%x[-1,0]%x[0,0]\n"
      "U02:%x[0,2]\n"
      "B\n"
      "B01:%x[0,0]\n");
  Sentence s;
  const char* letters = "abc";
  for (size_t t = 0; t < n; ++t) {
    std::string w;
    size_t len = 1 + rng.below(4);
    for (size_t i = 0; i < len; ++i) w.push_back(letters[rng.below(3)]);
    s.tokens.push_back(Token{w, std::nullopt});
    inst.gold.push_back(rng.below(k));
  }
  inst.rows = crf::derive_columns(s, nullptr);
  for (size_t t = 0; t < n; ++t) {
    for (const auto& tpl : inst.model.templates) {
      if (tpl.kind == crf::TemplateKind::Bigram && t == 0) continue;
      inst.model.vocabulary.add(crf::expand_template(tpl, inst.rows, t), tpl.kind, k);
    }
  }
  inst.model.weights.resize(inst.model.vocabulary.weight_count());
  for (auto& w : inst.model.weights) w = rng.uniform(-scale, scale);
  return inst;
}

/// Score of a tag sequence computed straight from feature strings and the
/// weight layout, bypassing encode() and the lattice code.
inline double brute_force_score(const crf::CrfModel& m, const std::vector<crf::ObservationRow>& rows,
                                const std::vector<size_t>& y) {
  const size_t k = m.tags.size();
  double s = 0;
  for (size_t t = 0; t < rows.size(); ++t) {
    for (const auto& tpl : m.templates) {
      if (tpl.kind == crf::TemplateKind::Bigram && t == 0) continue;
      auto id = m.vocabulary.find(crf::expand_template(tpl, rows, t));
      if (!id) continue;
      size_t off = m.vocabulary.offset(*id);
      s += tpl.kind == crf::TemplateKind::Unigram ? m.weights[off + y[t]] : m.weights[off + y[t - 1] * k + y[t]];
    }
  }
  return s;
}

/// Calls fn(sequence) for all K^n sequences in lexicographic order.
inline void for_each_sequence(size_t n, size_t k, const std::function<void(const std::vector<size_t>&)>& fn) {
  std::vector<size_t> y(n, 0);
  while (true) {
    fn(y);
    size_t i = n;
    while (i > 0) {
      if (++y[i - 1] < k) break;
      y[i - 1] = 0;
      --i;
    }
    if (i == 0) return;
  }
}

/// log sum_y exp(score(y)) by enumeration.
inline double brute_force_log_z(const crf::CrfModel& m, const std::vector<crf::ObservationRow>& rows) {
  std::vector<double> scores;
  for_each_sequence(rows.size(), m.tags.size(), [&](const std::vector<size_t>& y) {
    scores.push_back(brute_force_score(m, rows, y));
  });
  double mx = *std::max_element(scores.begin(), scores.end());
  double s = 0;
  for (double v : scores) s += std::exp(v - mx);
  return mx + std::log(s);
}

/// First sequence (lexicographic) attaining the maximum score.
inline std::vector<size_t> brute_force_argmax(const crf::CrfModel& m, const std::vector<crf::ObservationRow>& rows) {
  std::vector<size_t> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for_each_sequence(rows.size(), m.tags.size(), [&](const std::vector<size_t>& y) {
    double v = brute_force_score(m, rows, y);
    if (v > best_score) best_score = v, best = y;
  });
  return best;
}

}  // namespace seqtag::testing
