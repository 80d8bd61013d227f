#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "seqtag/corpus.hpp"
#include "seqtag/error.hpp"
#include "seqtag/tagset.hpp"

namespace seqtag::eval {

/// Throws StructureMismatch unless both corpora have the same sentence and
/// token counts and every token carries a tag.
inline void check_aligned(const TaggedCorpus& gold, const TaggedCorpus& pred) {
  if (gold.size() != pred.size()) {
    throw Error(ErrorKind::StructureMismatch, "gold has " + std::to_string(gold.size()) + " sentences, prediction has " +
                                                  std::to_string(pred.size()));
  }
  for (size_t i = 0; i < gold.size(); ++i) {
    const auto &g = gold.sentences[i], &p = pred.sentences[i];
    if (g.size() != p.size()) {
      throw Error(ErrorKind::StructureMismatch, "sentence " + std::to_string(i + 1) + ": gold has " +
                                                    std::to_string(g.size()) + " tokens, prediction has " +
                                                    std::to_string(p.size()));
    }
    if (!g.fully_tagged() || !p.fully_tagged()) {
      throw Error(ErrorKind::UntaggedCorpus, "sentence " + std::to_string(i + 1) + " has untagged tokens");
    }
  }
}

inline double token_accuracy(const TaggedCorpus& gold, const TaggedCorpus& pred) {
  check_aligned(gold, pred);
  size_t ok = 0, total = 0;
  for (size_t i = 0; i < gold.size(); ++i)
    for (size_t t = 0; t < gold.sentences[i].size(); ++t) {
      ok += *gold.sentences[i].tokens[t].tag == *pred.sentences[i].tokens[t].tag;
      ++total;
    }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

/// Percentage with two decimals, as reported on the command line.
inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

/// Rows are gold tags, columns predicted tags.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(Tagset tags) : tags_(std::move(tags)), counts_(tags_.size() * tags_.size(), 0) {}

  const Tagset& tags() const { return tags_; }
  size_t size() const { return tags_.size(); }
  size_t at(size_t gold, size_t pred) const { return counts_[gold * size() + pred]; }
  size_t& at(size_t gold, size_t pred) { return counts_[gold * size() + pred]; }

  size_t total() const {
    size_t s = 0;
    for (size_t c : counts_) s += c;
    return s;
  }
  size_t correct() const {
    size_t s = 0;
    for (size_t i = 0; i < size(); ++i) s += at(i, i);
    return s;
  }
  size_t errors() const { return total() - correct(); }
  double accuracy() const { return total() ? static_cast<double>(correct()) / static_cast<double>(total()) : 0.0; }
  size_t row_sum(size_t gold) const {
    size_t s = 0;
    for (size_t j = 0; j < size(); ++j) s += at(gold, j);
    return s;
  }

  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    return a.tags_.tags() == b.tags_.tags() && a.counts_ == b.counts_;
  }

 private:
  Tagset tags_;
  std::vector<size_t> counts_;
};

inline ConfusionMatrix confusion(const TaggedCorpus& gold, const TaggedCorpus& pred, const Tagset& tags) {
  check_aligned(gold, pred);
  ConfusionMatrix cm(tags);
  auto index = [&](const std::string& tag) {
    auto i = tags.find(tag);
    if (!i) throw Error(ErrorKind::UndeclaredTag, "tag '" + tag + "' is not in tagset " + tags.name());
    return *i;
  };
  for (size_t i = 0; i < gold.size(); ++i)
    for (size_t t = 0; t < gold.sentences[i].size(); ++t)
      cm.at(index(*gold.sentences[i].tokens[t].tag), index(*pred.sentences[i].tokens[t].tag))++;
  return cm;
}

struct MisclassEntry {
  std::string actual;
  std::string predicted;
  size_t instances = 0;
  double error_rate = 0;  // percent of all misclassified tokens, two decimals
  double exact_rate = 0;  // same, unrounded
};

/// 100 * instances / errors, rounded to two decimals.
inline double error_rate(size_t instances, size_t errors) {
  return std::round(10000.0 * static_cast<double>(instances) / static_cast<double>(errors)) / 100.0;
}

/// The k largest off-diagonal cells; ties keep gold-then-predicted order.
inline std::vector<MisclassEntry> top_misclassifications(const ConfusionMatrix& cm, size_t k) {
  const size_t errors = cm.errors();
  if (errors == 0) throw Error(ErrorKind::NoMisclassifications, "confusion matrix has no off-diagonal counts");
  std::vector<MisclassEntry> cells;
  for (size_t g = 0; g < cm.size(); ++g)
    for (size_t p = 0; p < cm.size(); ++p)
      if (g != p && cm.at(g, p) > 0)
        cells.push_back({cm.tags().tag(g), cm.tags().tag(p), cm.at(g, p), error_rate(cm.at(g, p), errors),
                         100.0 * static_cast<double>(cm.at(g, p)) / static_cast<double>(errors)});
  std::stable_sort(cells.begin(), cells.end(),
                   [](const MisclassEntry& a, const MisclassEntry& b) { return a.instances > b.instances; });
  if (cells.size() > k) cells.resize(k);
  return cells;
}

struct PairwiseReport {
  size_t tokens = 0;
  size_t disagreements = 0;
  double agreement_rate = 0;
  // Fractions of the disagreeing tokens; they sum to 1 when any exist.
  double a_wins = 0;
  double b_wins = 0;
  double neither = 0;
};

inline PairwiseReport pairwise_comparison(const TaggedCorpus& gold, const TaggedCorpus& a, const TaggedCorpus& b) {
  check_aligned(gold, a);
  check_aligned(gold, b);
  PairwiseReport r;
  size_t a_ok = 0, b_ok = 0, none = 0;
  for (size_t i = 0; i < gold.size(); ++i)
    for (size_t t = 0; t < gold.sentences[i].size(); ++t) {
      const auto& g = *gold.sentences[i].tokens[t].tag;
      const auto& pa = *a.sentences[i].tokens[t].tag;
      const auto& pb = *b.sentences[i].tokens[t].tag;
      ++r.tokens;
      if (pa == pb) continue;
      ++r.disagreements;
      if (pa == g) {
        ++a_ok;
      } else if (pb == g) {
        ++b_ok;
      } else {
        ++none;
      }
    }
  if (r.tokens) r.agreement_rate = static_cast<double>(r.tokens - r.disagreements) / static_cast<double>(r.tokens);
  if (r.disagreements) {
    const double d = static_cast<double>(r.disagreements);
    r.a_wins = static_cast<double>(a_ok) / d;
    r.b_wins = static_cast<double>(b_ok) / d;
    r.neither = static_cast<double>(none) / d;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Exports

/// Tab-separated matrix with a header row and a leading column of tag names.
inline void write_confusion(std::ostream& out, const ConfusionMatrix& cm) {
  out << "gold\\pred";
  for (const auto& t : cm.tags().tags()) out << '\t' << t;
  out << '\n';
  for (size_t g = 0; g < cm.size(); ++g) {
    out << cm.tags().tag(g);
    for (size_t p = 0; p < cm.size(); ++p) out << '\t' << cm.at(g, p);
    out << '\n';
  }
}

inline ConfusionMatrix read_confusion(std::istream& in, const std::string& tagset_name = "confusion") {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::EmptyCorpus, "empty confusion matrix");
  std::vector<std::string> header;
  {
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, '\t');
    while (std::getline(ls, cell, '\t')) header.push_back(cell);
  }
  ConfusionMatrix cm(Tagset(tagset_name, header));
  for (size_t g = 0; g < header.size(); ++g) {
    if (!std::getline(in, line)) throw Error(ErrorKind::MalformedLine, "confusion matrix is missing rows");
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, '\t');
    if (cell != header[g]) throw Error(ErrorKind::MalformedLine, "row " + std::to_string(g + 1) + " is labelled " + cell);
    for (size_t p = 0; p < header.size(); ++p) {
      if (!std::getline(ls, cell, '\t')) throw Error(ErrorKind::MalformedLine, "short confusion row " + header[g]);
      try {
        size_t used = 0;
        cm.at(g, p) = std::stoull(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(ErrorKind::NonNumeric, "confusion cell '" + cell + "' is not a count");
      }
    }
  }
  return cm;
}

/// Human-readable table followed by a key=value block.
inline std::string format_misclassifications(const ConfusionMatrix& cm, const std::vector<MisclassEntry>& rows) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-10s %10s %10s\n", "actual", "predicted", "instances", "error%");
  out << buf;
  for (const auto& e : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %-10s %10zu %10.2f\n", e.actual.c_str(), e.predicted.c_str(), e.instances,
                  e.error_rate);
    out << buf;
  }
  out << "\ntokens=" << cm.total() << "\ncorrect=" << cm.correct() << "\nerrors=" << cm.errors()
      << "\naccuracy=" << format_percent(cm.accuracy()) << '\n';
  return out.str();
}

inline std::string format_pairwise(const PairwiseReport& r) {
  std::ostringstream out;
  out << "tokens=" << r.tokens << "\ndisagreements=" << r.disagreements
      << "\nagreement=" << format_percent(r.agreement_rate) << "\na_correct_on_disagreement=" << format_percent(r.a_wins)
      << "\nb_correct_on_disagreement=" << format_percent(r.b_wins)
      << "\nneither_correct_on_disagreement=" << format_percent(r.neither) << '\n';
  return out.str();
}

}  // namespace seqtag::eval
