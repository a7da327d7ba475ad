#pragma once

// A loadable translation system: checkpoint arrays plus the vocabulary
// (vocab.txt) and BPE codes (bpe.codes) stored in the same directory.

#include <filesystem>
#include <string>
#include <vector>

#include "mnmt/bpe.hpp"
#include "mnmt/checkpoint.hpp"
#include "mnmt/data.hpp"
#include "mnmt/decode.hpp"
#include "mnmt/eval.hpp"
#include "mnmt/train.hpp"
#include "mnmt/vocab.hpp"

namespace mnmt {

inline void write_bundle_extras(const std::filesystem::path& dir, const Vocab& vocab, const BpeModel& bpe) {
  std::filesystem::create_directories(dir);
  vocab.save((dir / "vocab.txt").string());
  save_bpe(bpe, (dir / "bpe.codes").string());
}

template <class T>
struct Bundle {
  Model<T> model;
  Vocab vocab;
  BpeModel bpe;
  BpeApplier applier;

  Bundle(Model<T> m, Vocab v, BpeModel b)
      : model(std::move(m)), vocab(std::move(v)), bpe(std::move(b)), applier(bpe) {}

  // Untagged example; source tags are attached when given (gold-mask mode).
  Example encode(const std::vector<std::string>& src, const std::vector<std::string>& tgt,
                 const std::vector<MentionTag>& src_tags = {}) const {
    WordPair p{src, tgt, src_tags, {}};
    Example e = to_example(p, applier, vocab);
    for (const auto id : e.tgt)
      if (id == kUnk) {
        warn("target token outside the vocabulary scored as <unk>");
        break;
      }
    return e;
  }

  std::vector<std::string> words(const std::vector<std::int32_t>& ids) const {
    return bpe_reconstruct(vocab.decode(ids));
  }
};

template <class T>
Bundle<T> load_bundle(const std::filesystem::path& dir) {
  const Checkpoint ck = load_checkpoint(dir);
  return Bundle<T>(model_from_checkpoint<T>(ck), Vocab::load((dir / "vocab.txt").string()),
                   load_bpe((dir / "bpe.codes").string()));
}

// Teacher-forced scorer for contrastive evaluation: every target of one
// source is scored in a single batch.
template <class T>
SequenceScorer bundle_scorer(const Bundle<T>& b) {
  return [&b](const std::string& src, const std::vector<std::string>& targets) {
    std::vector<Example> pairs;
    for (const auto& t : targets) pairs.push_back(b.encode(split_ws(src), split_ws(t)));
    return score_sequences(b.model, std::span<const Example>(pairs));
  };
}

// Fraction of real source subwords (not </s> or padding) where the source
// classifier's thresholded prediction equals the gold tag.
template <class T>
double mention_agreement(const Model<T>& model, const std::vector<Example>& data, std::size_t token_cap = 4000) {
  if (!model.has_mention()) throw ContractError("mention agreement needs the mention architecture");
  std::size_t agree = 0, total = 0;
  for (const auto& ids : make_token_batches(data, token_cap, 0, 0)) {
    const Batch b = gather_batch(data, ids, true);
    DropoutStream none;
    const auto enc = model.encode(b, none);
    const MentionMask m = model.predict_mask(enc);
    for (std::size_t i = 0; i < b.size; ++i) {
      const std::size_t n = data[ids[i]].src.size();
      for (std::size_t j = 0; j < n; ++j) {
        agree += m.at(i, j) == b.src_tags[i * b.src_len + j];
        ++total;
      }
    }
  }
  return total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
}

}  // namespace mnmt
