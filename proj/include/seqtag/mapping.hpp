#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "seqtag/corpus.hpp"
#include "seqtag/error.hpp"
#include "seqtag/tagset.hpp"

namespace seqtag {

/// Total function from a source inventory onto a target inventory, plus
/// lexical overrides keyed by (surface form, source tag). Overrides may
/// name source tags outside the rule domain (echo words).
class TagMapping {
 public:
  TagMapping(Tagset source, Tagset target, std::map<std::string, std::string> rules)
      : source_(std::move(source)), target_(std::move(target)), rules_(std::move(rules)) {
    for (const auto& tag : source_.tags()) {
      auto it = rules_.find(tag);
      if (it == rules_.end()) throw Error(ErrorKind::UnmappedTag, "no rule for source tag " + tag);
      check_target(it->second);
    }
    for (const auto& [src, dst] : rules_) {
      if (!source_.contains(src)) throw Error(ErrorKind::UnknownSourceTag, "rule for undeclared source tag " + src);
    }
  }

  const Tagset& source() const { return source_; }
  const Tagset& target() const { return target_; }
  const std::map<std::string, std::string>& rules() const { return rules_; }
  const std::map<std::pair<std::string, std::string>, std::string>& overrides() const { return overrides_; }

  void add_override(const std::string& form, const std::string& source_tag, const std::string& target_tag) {
    check_target(target_tag);
    overrides_[{utf8::nfc(form), source_tag}] = target_tag;
  }

  const std::string& map(const std::string& form, const std::string& tag) const {
    if (!overrides_.empty()) {
      auto it = overrides_.find({form, tag});
      if (it != overrides_.end()) return it->second;
    }
    auto rule = rules_.find(tag);
    if (rule == rules_.end()) throw Error(ErrorKind::UnknownSourceTag, "source tag '" + tag + "' has no rule or override for form '" + form + "'");
    return rule->second;
  }

 private:
  void check_target(const std::string& tag) const {
    if (!target_.contains(tag)) throw Error(ErrorKind::InvalidTarget, "target tag '" + tag + "' not in " + target_.name());
  }

  Tagset source_;
  Tagset target_;
  std::map<std::string, std::string> rules_;
  std::map<std::pair<std::string, std::string>, std::string> overrides_;
};

inline TagMapping builtin_bis_to_ud() {
  std::map<std::string, std::string> rules;
  for (const auto& [src, dst] : tagsets::bis_to_ud_rules()) rules.emplace(src, dst);
  return TagMapping(tagsets::bis(), tagsets::ud(), std::move(rules));
}

inline const std::string& map_tag(const TagMapping& m, const std::string& form, const std::string& tag) {
  return m.map(form, tag);
}

/// Maps every tag; forms, counts and sentence boundaries are untouched.
inline TaggedCorpus map_corpus(const TagMapping& m, const TaggedCorpus& c) {
  TaggedCorpus out;
  out.tagset_name = m.target().name();
  out.sentences.reserve(c.sentences.size());
  for (size_t si = 0; si < c.sentences.size(); ++si) {
    Sentence s = c.sentences[si];
    for (size_t ti = 0; ti < s.tokens.size(); ++ti) {
      auto& tok = s.tokens[ti];
      if (!tok.tag) {
        throw Error(ErrorKind::UntaggedCorpus,
                    "sentence " + std::to_string(si) + " token " + std::to_string(ti) + " has no tag");
      }
      try {
        tok.tag = m.map(tok.form, *tok.tag);
      } catch (const Error& e) {
        throw Error(ErrorKind::UnmappedTag, "sentence " + std::to_string(si) + " token " + std::to_string(ti) + ": " + e.what());
      }
    }
    out.sentences.push_back(std::move(s));
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::string>> read_tab_rows(const std::string& path, size_t columns) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != columns) {
      throw Error(ErrorKind::MalformedLine, path + ":" + std::to_string(lineno) + ": expected " +
                                                std::to_string(columns) + " tab-separated fields");
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

}  // namespace detail

/// `SOURCE<TAB>TARGET` lines; the source inventory is the listed tags in file order.
inline TagMapping load_mapping(const std::string& path, const Tagset& target = tagsets::ud()) {
  std::vector<std::string> sources;
  std::map<std::string, std::string> rules;
  for (auto& row : detail::read_tab_rows(path, 2)) {
    if (!rules.emplace(row[0], row[1]).second) throw Error(ErrorKind::DuplicateTag, "duplicate rule for " + row[0]);
    sources.push_back(row[0]);
  }
  return TagMapping(Tagset(path, std::move(sources)), target, std::move(rules));
}

/// `form<TAB>SOURCE_TAG<TAB>TARGET_TAG` lines.
inline void load_overrides(TagMapping& m, const std::string& path) {
  for (auto& row : detail::read_tab_rows(path, 3)) m.add_override(row[0], row[1], row[2]);
}

inline void save_mapping(std::ostream& out, const TagMapping& m) {
  out << "# " << m.source().name() << " -> " << m.target().name() << "\n";
  for (const auto& tag : m.source().tags()) out << tag << '\t' << m.rules().at(tag) << '\n';
}

}  // namespace seqtag
