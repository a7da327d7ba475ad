#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "mnmt/batch.hpp"
#include "mnmt/model.hpp"

namespace mnmt {

struct DecodeOptions {
  std::size_t beam = 1;
  std::size_t max_len = 64;  // non-</s> tokens per hypothesis
  double length_penalty = 0.6;
  MaskSource mask_source = MaskSource::predicted;
};

struct Translation {
  std::vector<std::int32_t> tokens;  // without <s>/</s>
  double log_prob = 0;               // includes </s>
  double score = 0;                  // length-normalized
  bool truncated = false;            // </s> was forced at max_len
  std::vector<std::uint8_t> mention_mask;  // source positions incl. </s>; empty for baseline
};

inline double normalized_score(double log_prob, std::size_t length_with_eos, double alpha) {
  return log_prob / std::pow(static_cast<double>(length_with_eos), alpha);
}

namespace detail {

template <class T>
EncoderStates<T> repeat_encoder(const EncoderStates<T>& enc, std::size_t times) {
  EncoderStates<T> out;
  out.batch = times;
  out.length = enc.length;
  const std::size_t n = enc.states.size();
  std::vector<T> states(n * times);
  for (std::size_t i = 0; i < times; ++i)
    std::copy(enc.states.data().begin(), enc.states.data().end(), states.begin() + i * n);
  out.states = Tensor<T>::constant({times * enc.length, enc.states.cols()}, std::move(states));
  for (std::size_t i = 0; i < times; ++i) out.valid.insert(out.valid.end(), enc.valid.begin(), enc.valid.end());
  return out;
}

inline MentionMask repeat_mask(const MentionMask& m, std::size_t times) {
  MentionMask out{times, m.length, {}};
  for (std::size_t i = 0; i < times; ++i) out.bits.insert(out.bits.end(), m.bits.begin(), m.bits.end());
  return out;
}

// Log-probabilities of the next token for each prefix row; prefixes share one
// length and each row belongs to its own copy of the encoder output.
template <class T>
std::vector<std::vector<double>> next_token_logprobs(const Model<T>& model, const EncoderStates<T>& enc,
                                                     const MentionMask* mask,
                                                     const std::vector<std::vector<std::int32_t>>& prefixes) {
  const std::size_t rows = prefixes.size(), len = prefixes.front().size();
  std::vector<std::int32_t> ids;
  ids.reserve(rows * len);
  for (const auto& p : prefixes) ids.insert(ids.end(), p.begin(), p.end());
  const std::vector<std::uint8_t> valid(ids.size(), 1);
  DropoutStream none;
  const Tensor<T> h = model.decode_base(ids, len, valid, enc, none);
  // Only the last position matters; slice it before the output layer.
  const std::size_t d = h.cols();
  std::vector<T> last(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(h.data().begin() + ((r + 1) * len - 1) * d, d, last.begin() + r * d);
  Tensor<T> logits;
  if (model.has_mention()) {
    logits = model.head(h, enc, mask, len, MentionPath::full, none);
    std::vector<T> l(rows * logits.cols());
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(logits.data().begin() + ((r + 1) * len - 1) * logits.cols(), logits.cols(),
                  l.begin() + r * logits.cols());
    logits = Tensor<T>::constant({rows, logits.cols()}, std::move(l));
  } else {
    logits = model.logits(Tensor<T>::constant({rows, d}, std::move(last)));
  }
  const Tensor<T> lp = log_softmax(logits);
  std::vector<std::vector<double>> out(rows, std::vector<double>(lp.cols()));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t v = 0; v < lp.cols(); ++v) out[r][v] = lp[r * lp.cols() + v];
  return out;
}

inline bool generatable(std::int32_t id) { return id != kPad && id != kBos; }

inline void require_gold_tags(std::span<const Example> srcs, MaskSource source) {
  if (source != MaskSource::gold) return;
  for (const auto& e : srcs)
    if (e.src_tags.size() != e.src.size())
      throw ContractError("gold-mask decoding needs source mention tags");
}

}  // namespace detail

// Source mask for decoding: computed once from the encoder output.
template <class T>
MentionMask decoding_mask(const Model<T>& model, const Batch& src, const EncoderStates<T>& enc,
                          MaskSource source) {
  if (source == MaskSource::gold) {
    if (!src.has_tags) throw ContractError("gold-mask decoding needs source mention tags");
    return build_mask_from_tags(src.src_tags, src.src_valid, src.size, src.src_len);
  }
  return model.predict_mask(enc);
}

// Beam search for one source sentence. Each step ranks the 2*beam best
// extensions: those ending in </s> within the top `beam` finish, up to
// `beam` others continue.
// Search stops once `beam` hypotheses have finished; after max_len tokens
// </s> is forced. The result maximizes log_prob / len^alpha.
template <class T>
Translation translate(const Model<T>& model, const Example& src, const DecodeOptions& opt) {
  if (opt.beam == 0) throw std::invalid_argument("beam must be at least 1");
  detail::require_gold_tags(std::span<const Example>(&src, 1), opt.mask_source);
  const Batch sb = make_batch(std::span<const Example>(&src, 1), opt.mask_source == MaskSource::gold);
  DropoutStream none;
  const EncoderStates<T> enc = model.encode(sb, none);
  MentionMask mask;
  if (model.has_mention()) mask = decoding_mask(model, sb, enc, opt.mask_source);

  struct Hyp {
    std::vector<std::int32_t> prefix;  // starts with <s>
    double logp;
  };
  std::vector<Hyp> beams{{{kBos}, 0.0}};
  std::vector<Translation> finished;
  const std::size_t vocab = model.config().vocab_size;

  for (std::size_t step = 0; step <= opt.max_len && !beams.empty(); ++step) {
    const bool force_eos = step == opt.max_len;
    std::vector<std::vector<std::int32_t>> prefixes;
    for (const auto& h : beams) prefixes.push_back(h.prefix);
    const auto rep_enc = detail::repeat_encoder(enc, beams.size());
    const auto rep_mask = detail::repeat_mask(mask, beams.size());
    const auto lp = detail::next_token_logprobs(model, rep_enc, model.has_mention() ? &rep_mask : nullptr,
                                                prefixes);
    struct Cand {
      std::size_t beam;
      std::int32_t token;
      double logp;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (force_eos) {
        cands.push_back({b, kEos, beams[b].logp + lp[b][kEos]});
        continue;
      }
      for (std::size_t v = 0; v < vocab; ++v) {
        const auto id = static_cast<std::int32_t>(v);
        if (detail::generatable(id)) cands.push_back({b, id, beams[b].logp + lp[b][v]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
    if (!force_eos && cands.size() > 2 * opt.beam) cands.resize(2 * opt.beam);
    std::vector<Hyp> next;
    for (std::size_t rank = 0; rank < cands.size(); ++rank) {
      const Cand& c = cands[rank];
      if (c.token == kEos) {
        // A hypothesis may only finish from within the top `beam` slots.
        if (!force_eos && rank >= opt.beam) continue;
        Translation t;
        t.tokens.assign(beams[c.beam].prefix.begin() + 1, beams[c.beam].prefix.end());
        t.log_prob = c.logp;
        t.score = normalized_score(c.logp, t.tokens.size() + 1, opt.length_penalty);
        t.truncated = force_eos;
        finished.push_back(std::move(t));
      } else if (next.size() < opt.beam) {
        Hyp h{beams[c.beam].prefix, c.logp};
        h.prefix.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    beams = std::move(next);
    if (finished.size() >= opt.beam) break;
  }
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const Translation& a, const Translation& b) { return a.score < b.score; });
  Translation out = *best;
  out.mention_mask = mask.bits;
  return out;
}

// Greedy decoding of many sentences in one batch; equivalent to beam=1.
template <class T>
std::vector<Translation> translate_greedy_batch(const Model<T>& model, std::span<const Example> srcs,
                                                const DecodeOptions& opt) {
  detail::require_gold_tags(srcs, opt.mask_source);
  const Batch sb = make_batch(srcs, opt.mask_source == MaskSource::gold);
  DropoutStream none;
  const EncoderStates<T> enc = model.encode(sb, none);
  MentionMask mask;
  if (model.has_mention()) mask = decoding_mask(model, sb, enc, opt.mask_source);
  const std::size_t n = srcs.size(), vocab = model.config().vocab_size;
  std::vector<Translation> out(n);
  std::vector<std::vector<std::int32_t>> prefixes(n, std::vector<std::int32_t>{kBos});
  std::vector<bool> done(n, false);
  std::size_t remaining = n;
  for (std::size_t step = 0; step <= opt.max_len && remaining > 0; ++step) {
    const auto lp = detail::next_token_logprobs(model, enc, model.has_mention() ? &mask : nullptr, prefixes);
    for (std::size_t i = 0; i < n; ++i) {
      std::int32_t tok = kEos;
      if (step < opt.max_len) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < vocab; ++v) {
          const auto id = static_cast<std::int32_t>(v);
          if (detail::generatable(id) && lp[i][v] > best) {
            best = lp[i][v];
            tok = id;
          }
        }
      }
      if (!done[i]) {
        out[i].log_prob += lp[i][static_cast<std::size_t>(tok)];
        if (tok == kEos) {
          done[i] = true;
          --remaining;
          out[i].truncated = step == opt.max_len;
        } else {
          out[i].tokens.push_back(tok);
        }
      }
      // Finished rows keep decoding padding-free filler to keep shapes equal.
      prefixes[i].push_back(tok);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    out[i].score = normalized_score(out[i].log_prob, out[i].tokens.size() + 1, opt.length_penalty);
    if (model.has_mention())
      out[i].mention_mask.assign(mask.bits.begin() + static_cast<std::ptrdiff_t>(i * mask.length),
                                 mask.bits.begin() + static_cast<std::ptrdiff_t>((i + 1) * mask.length));
  }
  return out;
}

// Teacher-forced log P(tgt </s> | src), summed over positions. Batched;
// each example's score is independent of the others.
template <class T>
std::vector<double> score_sequences(const Model<T>& model, std::span<const Example> pairs,
                                    MaskSource mask_source = MaskSource::predicted) {
  if (pairs.empty()) return {};
  const Batch b = make_batch(pairs, mask_source == MaskSource::gold);
  ForwardOptions opt;
  opt.mask_source = mask_source;
  const auto r = model.forward(b, opt);
  const Tensor<T> lp = log_softmax(r.logits);
  const std::size_t vocab = lp.cols();
  std::vector<double> out(b.size, 0.0);
  for (std::size_t i = 0; i < b.size; ++i)
    for (std::size_t t = 0; t < b.tgt_len; ++t) {
      const std::size_t row = i * b.tgt_len + t;
      if (b.tgt_valid[row]) out[i] += lp[row * vocab + static_cast<std::size_t>(b.tgt_out[row])];
    }
  return out;
}

template <class T>
double score_sequence(const Model<T>& model, const Example& pair,
                      MaskSource mask_source = MaskSource::predicted) {
  return score_sequences(model, std::span<const Example>(&pair, 1), mask_source).front();
}

}  // namespace mnmt
