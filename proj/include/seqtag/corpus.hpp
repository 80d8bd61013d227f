#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "seqtag/error.hpp"
#include "seqtag/random.hpp"
#include "seqtag/tagset.hpp"
#include "seqtag/unicode.hpp"

namespace seqtag {

struct Token {
  std::string form;
  std::optional<std::string> tag;

  friend bool operator==(const Token&, const Token&) = default;
};

struct Sentence {
  std::vector<Token> tokens;

  size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  bool fully_tagged() const {
    return !tokens.empty() && std::all_of(tokens.begin(), tokens.end(), [](const Token& t) { return t.tag.has_value(); });
  }
  bool fully_untagged() const {
    return std::none_of(tokens.begin(), tokens.end(), [](const Token& t) { return t.tag.has_value(); });
  }

  std::vector<std::string> forms() const {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(t.form);
    return out;
  }

  friend bool operator==(const Sentence&, const Sentence&) = default;
};

struct TaggedCorpus {
  std::vector<Sentence> sentences;
  std::string tagset_name;

  size_t token_count() const {
    size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
  size_t size() const { return sentences.size(); }

  bool tagged() const {
    return !sentences.empty() &&
           std::all_of(sentences.begin(), sentences.end(), [](const Sentence& s) { return s.fully_tagged(); });
  }

  /// Same sentences and tokens with every tag removed.
  TaggedCorpus untagged() const {
    TaggedCorpus out{sentences, tagset_name};
    for (auto& s : out.sentences)
      for (auto& t : s.tokens) t.tag.reset();
    return out;
  }

  friend bool operator==(const TaggedCorpus&, const TaggedCorpus&) = default;
};

enum class ParseMode { Strict, Lenient };

// ---------------------------------------------------------------------------
// Reading and writing

/// Parses the one-token-per-line format: `form<TAB>tag` or `form`, blank
/// lines end sentences. Forms are NFC-normalized. In strict mode every tag
/// must belong to `tagset` and sentences may not mix tagged and untagged
/// tokens; lenient mode keeps whatever it reads for clean_corpus.
inline TaggedCorpus parse_corpus_text(std::istream& in, const Tagset& tagset, ParseMode mode = ParseMode::Strict,
                                      const std::string& source = "<input>") {
  TaggedCorpus corpus;
  corpus.tagset_name = tagset.name();
  Sentence current;
  std::string line;
  size_t lineno = 0;
  auto flush = [&] {
    if (current.empty()) return;
    if (mode == ParseMode::Strict && !current.fully_tagged() && !current.fully_untagged()) {
      throw Error(ErrorKind::MalformedLine,
                  source + ": sentence ending at line " + std::to_string(lineno) + " mixes tagged and untagged tokens");
    }
    corpus.sentences.push_back(std::move(current));
    current = Sentence{};
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    auto tab = line.find('\t');
    Token tok;
    if (tab == std::string::npos) {
      tok.form = line;
    } else {
      if (line.find('\t', tab + 1) != std::string::npos) {
        throw Error(ErrorKind::MalformedLine, source + ":" + std::to_string(lineno) + ": more than one tab");
      }
      tok.form = line.substr(0, tab);
      tok.tag = line.substr(tab + 1);
    }
    if (mode == ParseMode::Strict) {
      auto first = tok.form.find_first_not_of(" \f\v");
      if (first == std::string::npos) {
        throw Error(ErrorKind::MalformedLine, source + ":" + std::to_string(lineno) + ": empty form");
      }
      if (tok.tag && !tagset.contains(*tok.tag)) {
        throw Error(ErrorKind::UndeclaredTag,
                    source + ":" + std::to_string(lineno) + ": tag '" + *tok.tag + "' not in " + tagset.name());
      }
    }
    tok.form = utf8::nfc(tok.form);
    current.tokens.push_back(std::move(tok));
  }
  flush();
  if (corpus.sentences.empty()) throw Error(ErrorKind::EmptyCorpus, source + " contains no tokens");
  return corpus;
}

inline TaggedCorpus parse_corpus(const std::string& path, const Tagset& tagset, ParseMode mode = ParseMode::Strict) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open corpus " + path);
  return parse_corpus_text(in, tagset, mode, path);
}

inline void write_corpus(std::ostream& out, const TaggedCorpus& corpus) {
  for (const auto& s : corpus.sentences) {
    for (const auto& t : s.tokens) {
      out << t.form;
      if (t.tag) out << '\t' << *t.tag;
      out << '\n';
    }
    out << '\n';
  }
}

inline std::string serialize_corpus(const TaggedCorpus& corpus) {
  std::ostringstream os;
  write_corpus(os, corpus);
  return os.str();
}

inline void save_corpus(const std::string& path, const TaggedCorpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write corpus " + path);
  write_corpus(out, corpus);
}

// ---------------------------------------------------------------------------
// Cleaning

struct CleaningReport {
  size_t repaired_tags = 0;
  size_t dropped_sentences = 0;
  size_t dropped_empty = 0;
  size_t normalized_forms = 0;
  size_t raw_distinct_tags = 0;
  size_t clean_distinct_tags = 0;

  size_t total_actions() const { return repaired_tags + dropped_sentences + dropped_empty + normalized_forms; }

  std::string summary() const {
    std::ostringstream os;
    os << "repaired " << repaired_tags << " tags, dropped " << dropped_sentences << " sentences ("
       << dropped_empty << " empty), normalized " << normalized_forms << " forms; distinct tags "
       << raw_distinct_tags << " -> " << clean_distinct_tags << "\n";
    os << "repaired_tags=" << repaired_tags << "\n";
    os << "dropped_sentences=" << dropped_sentences << "\n";
    os << "dropped_empty=" << dropped_empty << "\n";
    os << "normalized_forms=" << normalized_forms << "\n";
    return os.str();
  }
};

namespace detail {

inline bool is_space_byte(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

inline std::string strip_whitespace(const std::string& s) {
  // Besides ASCII space, drop the UTF-8 no-break space and zero-width space.
  std::u32string out;
  for (char32_t cp : utf8::decode(s)) {
    if (cp < 0x80 && is_space_byte(static_cast<char>(cp))) continue;
    if (cp == 0x00A0 || cp == 0x200B || cp == 0xFEFF) continue;
    out.push_back(cp);
  }
  return utf8::encode(out);
}

inline std::string keep_tag_chars(const std::string& tag) {
  std::string out;
  for (char c : tag)
    if ((c >= 'A' && c <= 'Z') || c == '_') out.push_back(c);
  return out;
}

}  // namespace detail

/// Repairs tags by stripping characters outside [A-Z_], removes whitespace
/// inside forms, and drops untagged, unrepairable, or empty sentences.
inline std::pair<TaggedCorpus, CleaningReport> clean_corpus(const TaggedCorpus& raw, const Tagset& tagset) {
  CleaningReport report;
  TaggedCorpus out;
  out.tagset_name = tagset.name();
  std::map<std::string, size_t> raw_tags, clean_tags;
  for (const auto& sentence : raw.sentences) {
    for (const auto& t : sentence.tokens)
      if (t.tag) raw_tags[*t.tag]++;
    if (sentence.empty()) {
      report.dropped_empty++;
      continue;
    }
    if (!sentence.fully_tagged()) {
      report.dropped_sentences++;
      continue;
    }
    Sentence cleaned;
    size_t repairs = 0, normalized = 0;
    bool unrepairable = false;
    for (const auto& t : sentence.tokens) {
      Token tok;
      std::string form = utf8::nfc(detail::strip_whitespace(t.form));
      if (form != t.form) normalized++;
      if (form.empty()) continue;
      tok.form = std::move(form);
      if (tagset.contains(*t.tag)) {
        tok.tag = *t.tag;
      } else {
        std::string repaired = detail::keep_tag_chars(*t.tag);
        if (!tagset.contains(repaired)) {
          unrepairable = true;
          break;
        }
        tok.tag = repaired;
        repairs++;
      }
      cleaned.tokens.push_back(std::move(tok));
    }
    if (unrepairable) {
      report.dropped_sentences++;
      continue;
    }
    report.normalized_forms += normalized;
    if (cleaned.empty()) {
      report.dropped_empty++;
      continue;
    }
    report.repaired_tags += repairs;
    for (const auto& t : cleaned.tokens) clean_tags[*t.tag]++;
    out.sentences.push_back(std::move(cleaned));
  }
  report.raw_distinct_tags = raw_tags.size();
  report.clean_distinct_tags = clean_tags.size();
  return {std::move(out), report};
}

// ---------------------------------------------------------------------------
// Splitting

/// Exact non-negative rational.
struct Fraction {
  uint64_t num = 0;
  uint64_t den = 1;

  /// Parses "0.70", "7/10", or "1".
  static Fraction parse(const std::string& text) {
    Fraction f;
    auto slash = text.find('/');
    try {
      if (slash != std::string::npos) {
        f.num = std::stoull(text.substr(0, slash));
        f.den = std::stoull(text.substr(slash + 1));
      } else {
        auto dot = text.find('.');
        std::string whole = dot == std::string::npos ? text : text.substr(0, dot);
        std::string frac = dot == std::string::npos ? "" : text.substr(dot + 1);
        if (frac.size() > 12 || (whole.empty() && frac.empty())) throw std::invalid_argument(text);
        f.den = 1;
        for (size_t i = 0; i < frac.size(); ++i) f.den *= 10;
        f.num = (whole.empty() ? 0 : std::stoull(whole)) * f.den + (frac.empty() ? 0 : std::stoull(frac));
      }
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidSplit, "cannot parse fraction '" + text + "'");
    }
    if (f.den == 0) throw Error(ErrorKind::InvalidSplit, "zero denominator in '" + text + "'");
    return f;
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  uint64_t floor_times(uint64_t n) const { return static_cast<uint64_t>((static_cast<unsigned __int128>(n) * num) / den); }
};

struct SplitSpec {
  Fraction train{70, 100};
  Fraction dev{15, 100};
  Fraction test{15, 100};
  uint64_t seed = 1;

  void validate() const {
    for (const Fraction* f : {&train, &dev, &test}) {
      if (f->num == 0 || f->num >= f->den) throw Error(ErrorKind::InvalidSplit, "split fractions must lie in (0,1)");
    }
    // a/b + c/d + e/f == 1  <=>  a*d*f + c*b*f + e*b*d == b*d*f
    using u128 = unsigned __int128;
    u128 lhs = u128(train.num) * dev.den * test.den + u128(dev.num) * train.den * test.den +
               u128(test.num) * train.den * dev.den;
    u128 rhs = u128(train.den) * dev.den * test.den;
    if (lhs != rhs) throw Error(ErrorKind::InvalidSplit, "split fractions must sum to 1");
  }
};

struct CorpusSplit {
  TaggedCorpus train, dev, test;
};

/// Seeded shuffle of sentences, then contiguous partition:
/// |train| = floor(N*train), |dev| = floor(N*dev), test gets the rest.
inline CorpusSplit split_corpus(const TaggedCorpus& corpus, const SplitSpec& spec) {
  spec.validate();
  const size_t n = corpus.sentences.size();
  if (n < 3) throw Error(ErrorKind::TooFewSentences, "need at least 3 sentences to split, got " + std::to_string(n));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.seed);
  rng.shuffle(std::span<size_t>(order));
  const size_t n_train = spec.train.floor_times(n);
  const size_t n_dev = spec.dev.floor_times(n);
  CorpusSplit out;
  for (auto* part : {&out.train, &out.dev, &out.test}) part->tagset_name = corpus.tagset_name;
  for (size_t i = 0; i < n; ++i) {
    auto& target = i < n_train ? out.train : (i < n_train + n_dev ? out.dev : out.test);
    target.sentences.push_back(corpus.sentences[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

/// (tag, count), descending by count with ties broken by tag name.
inline std::vector<std::pair<std::string, size_t>> tag_distribution(const TaggedCorpus& corpus) {
  if (!corpus.tagged()) throw Error(ErrorKind::UntaggedCorpus, "tag distribution needs a fully tagged corpus");
  std::map<std::string, size_t> counts;
  for (const auto& s : corpus.sentences)
    for (const auto& t : s.tokens) counts[*t.tag]++;
  std::vector<std::pair<std::string, size_t>> out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

}  // namespace seqtag
