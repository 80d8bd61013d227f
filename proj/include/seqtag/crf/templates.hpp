#pragma once

#include <fstream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "seqtag/error.hpp"

namespace seqtag::crf {

enum class TemplateKind { Unigram, Bigram };

/// `%x[row,col]`: the value of column `col` at relative position `row`.
struct Macro {
  int row = 0;
  size_t column = 0;
  friend bool operator==(const Macro&, const Macro&) = default;
};

/// A template body is a sequence of literal text and macros.
using TemplatePart = std::variant<std::string, Macro>;

struct FeatureTemplate {
  std::string id;
  TemplateKind kind = TemplateKind::Unigram;
  std::vector<TemplatePart> parts;

  std::vector<Macro> macros() const {
    std::vector<Macro> out;
    for (const auto& p : parts)
      if (const auto* m = std::get_if<Macro>(&p)) out.push_back(*m);
    return out;
  }

  /// Source line that parses back to this template.
  std::string text() const {
    std::string s = id;
    if (parts.empty()) return s;
    s += ':';
    for (const auto& p : parts) {
      if (const auto* lit = std::get_if<std::string>(&p)) {
        s += *lit;
      } else {
        const auto& m = std::get<Macro>(p);
        s += "%x[" + std::to_string(m.row) + "," + std::to_string(m.column) + "]";
      }
    }
    return s;
  }

  friend bool operator==(const FeatureTemplate&, const FeatureTemplate&) = default;
};

namespace detail {

inline Macro parse_macro(const std::string& line, size_t& pos) {
  // pos points at '%'
  auto fail = [&] { return Error(ErrorKind::MalformedMacro, "bad macro in template '" + line + "'"); };
  if (line.compare(pos, 3, "%x[") != 0) throw fail();
  size_t close = line.find(']', pos);
  if (close == std::string::npos) throw fail();
  std::string inner = line.substr(pos + 3, close - pos - 3);
  size_t comma = inner.find(',');
  if (comma == std::string::npos || inner.find(',', comma + 1) != std::string::npos) throw fail();
  std::string r = inner.substr(0, comma), c = inner.substr(comma + 1);
  auto is_int = [](const std::string& s, bool allow_sign) {
    if (s.empty()) return false;
    size_t i = 0;
    if (allow_sign && (s[0] == '-' || s[0] == '+')) i = 1;
    if (i == s.size()) return false;
    for (; i < s.size(); ++i)
      if (s[i] < '0' || s[i] > '9') return false;
    return true;
  };
  if (!is_int(r, true) || !is_int(c, false)) throw fail();
  Macro m;
  try {
    m.row = std::stoi(r);
    m.column = std::stoul(c);
  } catch (const std::exception&) {
    throw fail();
  }
  pos = close + 1;
  return m;
}

}  // namespace detail

inline FeatureTemplate parse_template_line(const std::string& line) {
  FeatureTemplate t;
  if (line.empty() || (line[0] != 'U' && line[0] != 'B')) {
    throw Error(ErrorKind::MalformedMacro, "template must start with U or B: '" + line + "'");
  }
  t.kind = line[0] == 'U' ? TemplateKind::Unigram : TemplateKind::Bigram;
  auto colon = line.find(':');
  t.id = line.substr(0, colon);
  if (colon == std::string::npos) {
    if (t.kind == TemplateKind::Unigram) throw Error(ErrorKind::MalformedMacro, "unigram template without body: '" + line + "'");
    return t;
  }
  std::string literal;
  size_t pos = colon + 1;
  while (pos < line.size()) {
    if (line[pos] == '%') {
      if (!literal.empty()) t.parts.emplace_back(std::move(literal)), literal.clear();
      t.parts.emplace_back(detail::parse_macro(line, pos));
    } else {
      literal.push_back(line[pos++]);
    }
  }
  if (!literal.empty()) t.parts.emplace_back(std::move(literal));
  if (t.kind == TemplateKind::Unigram && t.macros().empty()) {
    throw Error(ErrorKind::MalformedMacro, "unigram template without macros: '" + line + "'");
  }
  return t;
}

/// One template per non-blank line; '#' starts a comment line.
inline std::vector<FeatureTemplate> parse_templates(const std::string& text) {
  std::vector<FeatureTemplate> out;
  std::set<std::string> ids;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    line = line.substr(first);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.pop_back();
    auto t = parse_template_line(line);
    if (!ids.insert(t.id).second) throw Error(ErrorKind::DuplicateTemplate, "template id " + t.id + " repeated");
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<FeatureTemplate> load_templates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open template file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_templates(ss.str());
}

inline std::string format_templates(const std::vector<FeatureTemplate>& templates) {
  std::string out;
  for (const auto& t : templates) out += t.text() + "\n";
  return out;
}

/// The nine word/aux/affix templates plus the bare transition template "B".
inline const std::string& default_template_text() {
  static const std::string text =
      "# current word with neighbours\n"
      "U01:%x[-1,0]%x[0,0]%x[1,0]\n"
      "U02:%x[-2,0]%x[-1,0]%x[0,0]\n"
      "U03:%x[0,0]%x[1,0]%x[2,0]\n"
      "# auxiliary tag\n"
      "U04:%x[0,1]\n"
      "# suffixes of length 3, 4, 5\n"
      "U05:%x[0,2]\n"
      "U06:%x[0,3]\n"
      "U07:%x[0,4]\n"
      "# prefixes of length 2, 3\n"
      "U08:%x[0,5]\n"
      "U09:%x[0,6]\n"
      "B\n";
  return text;
}

inline std::vector<FeatureTemplate> default_templates() { return parse_templates(default_template_text()); }

using ObservationRow = std::vector<std::string>;

namespace detail {

inline std::string boundary_literal(long pos, size_t n) {
  if (pos < 0) return "_B" + std::to_string(pos);
  return "_B+" + std::to_string(pos - static_cast<long>(n) + 1);
}

}  // namespace detail

/// Expands one template at position t. Adjacent macros are joined with '/'.
inline std::string expand_template(const FeatureTemplate& tpl, std::span<const ObservationRow> rows, size_t t) {
  std::string s = tpl.id;
  if (tpl.parts.empty()) return s;
  s += ':';
  bool prev_macro = false;
  for (const auto& part : tpl.parts) {
    if (const auto* lit = std::get_if<std::string>(&part)) {
      s += *lit;
      prev_macro = false;
      continue;
    }
    const auto& m = std::get<Macro>(part);
    if (prev_macro) s += '/';
    long pos = static_cast<long>(t) + m.row;
    if (pos < 0 || pos >= static_cast<long>(rows.size())) {
      s += detail::boundary_literal(pos, rows.size());
    } else {
      const auto& row = rows[static_cast<size_t>(pos)];
      if (m.column >= row.size()) {
        throw Error(ErrorKind::ColumnOutOfRange, "template " + tpl.id + " references column " +
                                                     std::to_string(m.column) + " of a " + std::to_string(row.size()) +
                                                     "-column row");
      }
      s += row[m.column];
    }
    prev_macro = true;
  }
  return s;
}

inline std::vector<std::string> extract_features(const std::vector<FeatureTemplate>& templates,
                                                 std::span<const ObservationRow> rows, size_t t) {
  if (t >= rows.size()) throw Error(ErrorKind::EmptySentence, "position out of range");
  std::vector<std::string> out;
  out.reserve(templates.size());
  for (const auto& tpl : templates) out.push_back(expand_template(tpl, rows, t));
  return out;
}

}  // namespace seqtag::crf
