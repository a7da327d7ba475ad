#pragma once

// Word-level parallel corpora to subword-id examples.

#include <filesystem>
#include <string>
#include <vector>

#include "mnmt/batch.hpp"
#include "mnmt/bpe.hpp"
#include "mnmt/mention_tags.hpp"
#include "mnmt/text.hpp"
#include "mnmt/vocab.hpp"

namespace mnmt {

struct WordPair {
  std::vector<std::string> src, tgt;
  std::vector<MentionTag> src_tags, tgt_tags;  // word level; empty if untagged
};

// Reads <dir>/<split>.src and .tgt, plus .src.tags/.tgt.tags tag files when
// present. Tag files hold POS or mention tags and must match the tokens.
inline std::vector<WordPair> load_word_pairs(const std::filesystem::path& dir,
                                             const std::string& split) {
  const auto src = read_tokenized((dir / (split + ".src")).string());
  const auto tgt = read_tokenized((dir / (split + ".tgt")).string());
  if (src.size() != tgt.size())
    throw std::runtime_error(split + ": source and target line counts differ");
  std::vector<WordPair> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    out[i].src = src[i];
    out[i].tgt = tgt[i];
  }
  auto attach = [&](const std::filesystem::path& path, bool source) {
    if (!std::filesystem::exists(path)) return;
    const auto sents = read_tag_file(path.string());
    if (sents.size() != out.size())
      throw AlignmentError(path.string() + ": " + std::to_string(sents.size()) +
                           " tagged sentences for " + std::to_string(out.size()) + " lines");
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto& words = source ? out[i].src : out[i].tgt;
      if (sents[i].tokens != words)
        throw AlignmentError(path.string() + ": sentence " + std::to_string(i + 1) +
                             " tokens differ from the corpus");
      std::vector<MentionTag> tags;
      for (const auto& t : sents[i].tags) {
        MentionTag m;
        tags.push_back(parse_mention_tag(t, m) ? m : pos_to_mention(t));
      }
      (source ? out[i].src_tags : out[i].tgt_tags) = std::move(tags);
    }
  };
  attach(dir / (split + ".src.tags"), true);
  attach(dir / (split + ".tgt.tags"), false);
  return out;
}

struct SubwordSentence {
  std::vector<std::string> pieces;
  std::vector<MentionTag> tags;
};

inline SubwordSentence to_subwords(const std::vector<std::string>& words,
                                   const std::vector<MentionTag>& word_tags,
                                   const BpeApplier& bpe) {
  const Segmentation seg = bpe.apply(words);
  SubwordSentence s{seg.subwords, {}};
  if (!word_tags.empty()) s.tags = propagate_tags(word_tags, seg.word_starts);
  return s;
}

inline Example to_example(const WordPair& p, const BpeApplier& bpe, const Vocab& vocab) {
  const auto s = to_subwords(p.src, p.src_tags, bpe);
  const auto t = to_subwords(p.tgt, p.tgt_tags, bpe);
  return {vocab.encode(s.pieces), s.tags, vocab.encode(t.pieces), t.tags};
}

inline std::vector<Example> to_examples(const std::vector<WordPair>& pairs, const BpeApplier& bpe,
                                        const Vocab& vocab) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(to_example(p, bpe, vocab));
  return out;
}

// Joint vocabulary over both sides of the subword-segmented training data.
inline Vocab build_joint_vocab(const std::vector<WordPair>& pairs, const BpeApplier& bpe) {
  std::vector<std::vector<std::string>> sents;
  sents.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    sents.push_back(bpe.apply(p.src).subwords);
    sents.push_back(bpe.apply(p.tgt).subwords);
  }
  return Vocab::build(sents);
}

inline bool all_tagged(const std::vector<WordPair>& pairs) {
  for (const auto& p : pairs)
    if (p.src_tags.size() != p.src.size() || p.tgt_tags.size() != p.tgt.size()) return false;
  return true;
}

}  // namespace mnmt
