#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "mnmt/mention_tags.hpp"
#include "mnmt/vocab.hpp"

namespace mnmt {

// One sentence pair in subword ids. Tags are per subword and may be empty
// when the pair is untagged.
struct Example {
  std::vector<std::int32_t> src;
  std::vector<MentionTag> src_tags;
  std::vector<std::int32_t> tgt;
  std::vector<MentionTag> tgt_tags;
};

// Padded batch, row-major [size, len]. The source gets </s> appended; the
// decoder reads <s> y and predicts y </s>. Target tags align with tgt_out.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<std::int32_t> src, tgt_in, tgt_out;
  std::vector<std::uint8_t> src_valid, tgt_valid;
  std::vector<std::uint8_t> src_tags, tgt_tags;
  bool has_tags = false;

  std::size_t src_tokens() const {
    return static_cast<std::size_t>(std::count(src_valid.begin(), src_valid.end(), 1));
  }
  std::size_t tgt_tokens() const {
    return static_cast<std::size_t>(std::count(tgt_valid.begin(), tgt_valid.end(), 1));
  }
};

inline Batch make_batch(std::span<const Example> examples, bool with_tags = true,
                        std::size_t min_src_len = 0) {
  Batch b;
  b.size = examples.size();
  b.has_tags = with_tags;
  b.src_len = min_src_len;
  for (const auto& e : examples) {
    b.src_len = std::max(b.src_len, e.src.size() + 1);
    b.tgt_len = std::max(b.tgt_len, e.tgt.size() + 1);
  }
  b.src.assign(b.size * b.src_len, kPad);
  b.src_valid.assign(b.size * b.src_len, 0);
  b.src_tags.assign(b.size * b.src_len, 0);
  b.tgt_in.assign(b.size * b.tgt_len, kPad);
  b.tgt_out.assign(b.size * b.tgt_len, kPad);
  b.tgt_valid.assign(b.size * b.tgt_len, 0);
  b.tgt_tags.assign(b.size * b.tgt_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const Example& e = examples[i];
    if (with_tags && (e.src_tags.size() != e.src.size() || e.tgt_tags.size() != e.tgt.size()))
      throw AlignmentError("make_batch: tags do not align with subwords");
    std::size_t row = i * b.src_len;
    for (std::size_t j = 0; j < e.src.size(); ++j) {
      b.src[row + j] = e.src[j];
      b.src_valid[row + j] = 1;
      if (with_tags) b.src_tags[row + j] = static_cast<std::uint8_t>(e.src_tags[j]);
    }
    b.src[row + e.src.size()] = kEos;
    b.src_valid[row + e.src.size()] = 1;

    row = i * b.tgt_len;
    b.tgt_in[row] = kBos;
    for (std::size_t j = 0; j < e.tgt.size(); ++j) {
      b.tgt_in[row + j + 1] = e.tgt[j];
      b.tgt_out[row + j] = e.tgt[j];
      if (with_tags) b.tgt_tags[row + j] = static_cast<std::uint8_t>(e.tgt_tags[j]);
    }
    b.tgt_out[row + e.tgt.size()] = kEos;
    for (std::size_t j = 0; j <= e.tgt.size(); ++j) b.tgt_valid[row + j] = 1;
  }
  return b;
}

}  // namespace mnmt
