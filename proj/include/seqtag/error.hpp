#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace seqtag {

enum class ErrorKind {
  Usage,
  Io,
  EmptyCorpus,
  MalformedLine,
  UndeclaredTag,
  UntaggedCorpus,
  TooFewSentences,
  InvalidSplit,
  UnknownSourceTag,
  UnmappedTag,
  InvalidTarget,
  DuplicateTag,
  MalformedMacro,
  DuplicateTemplate,
  ColumnOutOfRange,
  EmptySentence,
  TagOutOfRange,
  EmptyVocabulary,
  NonFinite,
  CountMismatch,
  NonNumeric,
  DuplicateWord,
  NoSubwords,
  EmptyTable,
  UnknownWord,
  DimensionMismatch,
  EmptyWord,
  DropoutActive,
  StructureMismatch,
  NoMisclassifications,
  TagsetMismatch,
  BadModelFile,
  InvalidConfig,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return "Usage";
    case ErrorKind::Io: return "Io";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::MalformedLine: return "MalformedLine";
    case ErrorKind::UndeclaredTag: return "UndeclaredTag";
    case ErrorKind::UntaggedCorpus: return "UntaggedCorpus";
    case ErrorKind::TooFewSentences: return "TooFewSentences";
    case ErrorKind::InvalidSplit: return "InvalidSplit";
    case ErrorKind::UnknownSourceTag: return "UnknownSourceTag";
    case ErrorKind::UnmappedTag: return "UnmappedTag";
    case ErrorKind::InvalidTarget: return "InvalidTarget";
    case ErrorKind::DuplicateTag: return "DuplicateTag";
    case ErrorKind::MalformedMacro: return "MalformedMacro";
    case ErrorKind::DuplicateTemplate: return "DuplicateTemplate";
    case ErrorKind::ColumnOutOfRange: return "ColumnOutOfRange";
    case ErrorKind::EmptySentence: return "EmptySentence";
    case ErrorKind::TagOutOfRange: return "TagOutOfRange";
    case ErrorKind::EmptyVocabulary: return "EmptyVocabulary";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::NonNumeric: return "NonNumeric";
    case ErrorKind::DuplicateWord: return "DuplicateWord";
    case ErrorKind::NoSubwords: return "NoSubwords";
    case ErrorKind::EmptyTable: return "EmptyTable";
    case ErrorKind::UnknownWord: return "UnknownWord";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptyWord: return "EmptyWord";
    case ErrorKind::DropoutActive: return "DropoutActive";
    case ErrorKind::StructureMismatch: return "StructureMismatch";
    case ErrorKind::NoMisclassifications: return "NoMisclassifications";
    case ErrorKind::TagsetMismatch: return "TagsetMismatch";
    case ErrorKind::BadModelFile: return "BadModelFile";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a kind,
/// so callers (tests, the CLI exit-code mapping) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Numeric failures get their own exit code in the CLI.
inline bool is_numeric(ErrorKind k) {
  return k == ErrorKind::NonFinite;
}

}  // namespace seqtag
