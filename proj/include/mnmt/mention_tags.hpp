#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mnmt/text.hpp"

namespace mnmt {

enum class MentionTag : std::uint8_t { none = 0, mention = 1 };

struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const char* to_string(MentionTag t) { return t == MentionTag::mention ? "mention" : "none"; }

inline bool parse_mention_tag(const std::string& s, MentionTag& out) {
  const std::string l = to_lower(s);
  if (l == "mention") {
    out = MentionTag::mention;
    return true;
  }
  if (l == "none") {
    out = MentionTag::none;
    return true;
  }
  return false;
}

inline const std::set<std::string>& universal_pos_tags() {
  static const std::set<std::string> tags{"ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET",
                                          "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
                                          "PUNCT", "SCONJ", "SYM", "VERB", "X", "SPACE"};
  return tags;
}

// NOUN, PRON, PROPN, SYM and NUM are mentions; every other tag is none.
// Strings outside the universal set are reported and treated as none.
inline MentionTag pos_to_mention(const std::string& pos) {
  static const std::set<std::string> mention_pos{"NOUN", "PRON", "PROPN", "SYM", "NUM"};
  if (mention_pos.count(pos)) return MentionTag::mention;
  if (!universal_pos_tags().count(pos)) warn("unknown POS tag '" + pos + "' mapped to none");
  return MentionTag::none;
}

inline std::vector<MentionTag> map_pos_to_mention(const std::vector<std::string>& pos_tags) {
  std::vector<MentionTag> out;
  out.reserve(pos_tags.size());
  for (const auto& p : pos_tags) out.push_back(pos_to_mention(p));
  return out;
}

// Expands word-level tags to subwords: every subword of word w takes
// word_tags[w]. word_starts follows Segmentation::word_starts.
inline std::vector<MentionTag> propagate_tags(const std::vector<MentionTag>& word_tags,
                                              const std::vector<std::size_t>& word_starts) {
  if (word_starts.empty() || word_starts.size() != word_tags.size() + 1)
    throw AlignmentError("propagate_tags: " + std::to_string(word_tags.size()) +
                         " word tags for " +
                         std::to_string(word_starts.empty() ? 0 : word_starts.size() - 1) +
                         " words");
  std::vector<MentionTag> out;
  out.reserve(word_starts.back());
  for (std::size_t w = 0; w < word_tags.size(); ++w) {
    if (word_starts[w + 1] < word_starts[w])
      throw AlignmentError("propagate_tags: word boundaries are not monotone");
    out.insert(out.end(), word_starts[w + 1] - word_starts[w], word_tags[w]);
  }
  return out;
}

// One sentence of a tag file: parallel token and tag columns.
struct TaggedTokens {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;
};

// TSV, one "token<TAB>tag" per line, sentences separated by a blank line.
inline std::vector<TaggedTokens> read_tag_file(const std::string& path) {
  std::vector<TaggedTokens> out;
  TaggedTokens cur;
  bool open = false;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) {
      out.push_back(std::move(cur));
      cur = {};
      open = false;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected token<TAB>tag");
    cur.tokens.push_back(line.substr(0, tab));
    cur.tags.push_back(line.substr(tab + 1));
    open = true;
  }
  if (open) out.push_back(std::move(cur));
  return out;
}

inline void write_tag_file(const std::string& path, const std::vector<TaggedTokens>& sents) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& s : sents) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) out << s.tokens[i] << '\t' << s.tags[i] << '\n';
    out << '\n';
  }
}

// Reads a tag file whose tags are either mention/none or universal POS tags.
inline std::vector<std::vector<MentionTag>> read_mention_tags(const std::string& path) {
  std::vector<std::vector<MentionTag>> out;
  for (const auto& s : read_tag_file(path)) {
    std::vector<MentionTag> tags;
    tags.reserve(s.tags.size());
    for (const auto& t : s.tags) {
      MentionTag m;
      tags.push_back(parse_mention_tag(t, m) ? m : pos_to_mention(t));
    }
    out.push_back(std::move(tags));
  }
  return out;
}

}  // namespace mnmt
