#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqtag/error.hpp"

namespace seqtag {

/// A closed, ordered tag inventory. Index order is part of the contract:
/// one-hot agreement vectors and model files address tags by index.
class Tagset {
 public:
  Tagset() = default;

  Tagset(std::string name, std::vector<std::string> tags) : name_(std::move(name)), tags_(std::move(tags)) {
    for (size_t i = 0; i < tags_.size(); ++i) {
      if (!index_.emplace(tags_[i], i).second) {
        throw Error(ErrorKind::DuplicateTag, "tag '" + tags_[i] + "' declared twice in " + name_);
      }
    }
  }

  const std::string& name() const { return name_; }
  const std::vector<std::string>& tags() const { return tags_; }
  size_t size() const { return tags_.size(); }
  bool contains(const std::string& tag) const { return index_.count(tag) != 0; }

  std::optional<size_t> find(const std::string& tag) const {
    auto it = index_.find(tag);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  size_t index(const std::string& tag) const {
    auto it = index_.find(tag);
    if (it == index_.end()) throw Error(ErrorKind::UndeclaredTag, "tag '" + tag + "' not in tagset " + name_);
    return it->second;
  }

  const std::string& tag(size_t i) const { return tags_.at(i); }

  friend bool operator==(const Tagset& a, const Tagset& b) { return a.name_ == b.name_ && a.tags_ == b.tags_; }

 private:
  std::string name_;
  std::vector<std::string> tags_;
  std::unordered_map<std::string, size_t> index_;
};

namespace tagsets {

// Listing order of the UD distribution table (NOUN is index 0).
inline const Tagset& ud() {
  static const Tagset t("UD", {"NOUN", "VERB", "PUNCT", "PROPN", "ADJ", "NUM", "CCONJ", "PART", "PRON", "DET",
                               "ADP", "ADV", "SCONJ", "X", "AUX", "INTJ", "SYM"});
  return t;
}

inline const std::vector<std::pair<std::string, std::string>>& bis_to_ud_rules() {
  static const std::vector<std::pair<std::string, std::string>> rules = {
      {"N_NN", "NOUN"},       {"N_NNV", "NOUN"},       {"N_NST", "NOUN"},     {"N_NNP", "PROPN"},
      {"PR_PRP", "PRON"},     {"PR_PRF", "PRON"},      {"PR_PRL", "PRON"},    {"PR_PRC", "PRON"},
      {"PR_PRQ", "PRON"},     {"PR_PRI", "PRON"},      {"DM_DMD", "DET"},     {"DM_DMR", "DET"},
      {"DM_DMQ", "DET"},      {"DM_DMI", "DET"},       {"V_VM", "VERB"},      {"V_VM_VNF", "VERB"},
      {"V_VM_VNIF", "VERB"},  {"V_VM_VNG", "VERB"},    {"V_VAUX", "AUX"},     {"JJ", "ADJ"},
      {"RB", "ADV"},          {"PSP", "ADP"},          {"CC_CCS", "SCONJ"},   {"CC_CCS_UT", "SCONJ"},
      {"CC_CCD", "CCONJ"},    {"RP_RPD", "PART"},      {"RP_INJ", "INTJ"},    {"RP_INTF", "PART"},
      {"RP_CL", "PART"},      {"RP_NEG", "PART"},      {"QT_QTF", "PART"},    {"QT_QTC", "NUM"},
      {"QT_QTO", "NUM"},      {"RD_PUNC", "PUNCT"},    {"RD_SYM", "SYM"},     {"RD_RDF", "X"},
      {"RD_UNK", "X"},
  };
  return rules;
}

/// The 37 BIS tags that have a fixed UD rule.
inline const Tagset& bis() {
  static const Tagset t = [] {
    std::vector<std::string> tags;
    for (const auto& [src, dst] : bis_to_ud_rules()) tags.push_back(src);
    return Tagset("BIS", std::move(tags));
  }();
  return t;
}

/// BIS plus the echo-word class, which has no rule and maps only through overrides.
inline const Tagset& bis_echo() {
  static const Tagset t = [] {
    std::vector<std::string> tags = bis().tags();
    tags.push_back("RD_ECH");
    return Tagset("BIS-ECHO", std::move(tags));
  }();
  return t;
}

/// Resolves "ud", "bis", "bis-echo" (case-insensitive), otherwise reads a
/// file with one tag per line ('#' comments).
inline Tagset by_name_or_file(const std::string& spec) {
  std::string lower;
  for (char c : spec) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (lower == "ud") return ud();
  if (lower == "bis") return bis();
  if (lower == "bis-echo" || lower == "bis_echo") return bis_echo();
  std::ifstream in(spec);
  if (!in) throw Error(ErrorKind::Io, "cannot open tagset file " + spec);
  std::vector<std::string> tags;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    tags.push_back(line);
  }
  return Tagset(spec, std::move(tags));
}

}  // namespace tagsets
}  // namespace seqtag
