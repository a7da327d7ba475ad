#pragma once

// Mention attention: a cross-attention sublayer over source mention
// positions only, placed once above the decoder stack and followed by a
// second feed-forward sublayer. Two per-position classifiers predict
// mention tags on the encoder and decoder sides.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mnmt/layers.hpp"
#include "mnmt/mention_tags.hpp"

namespace mnmt {

// 1 = attend (mention subword), 0 = non-mention or padding; [batch, length].
struct MentionMask {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> bits;

  bool row_empty(std::size_t b) const {
    for (std::size_t j = 0; j < length; ++j)
      if (bits[b * length + j]) return false;
    return true;
  }
  std::uint8_t at(std::size_t b, std::size_t j) const { return bits[b * length + j]; }
};

inline MentionMask build_mask_from_tags(std::span<const std::uint8_t> tags,
                                        std::span<const std::uint8_t> valid, std::size_t batch,
                                        std::size_t length) {
  if (tags.size() != batch * length || valid.size() != batch * length)
    throw AlignmentError("build_mask_from_tags: tags and padding mask must both be " +
                         std::to_string(batch) + "x" + std::to_string(length));
  MentionMask m{batch, length, std::vector<std::uint8_t>(tags.size())};
  for (std::size_t i = 0; i < tags.size(); ++i)
    m.bits[i] = (tags[i] == static_cast<std::uint8_t>(MentionTag::mention) && valid[i]) ? 1 : 0;
  return m;
}

template <class T>
struct ClassifierWeights {
  Tensor<T> w1, b1, w2, b2;  // d -> d (ReLU) -> 1
};

template <class T>
ClassifierWeights<T> register_classifier(ParameterSet<T>& ps, const std::string& prefix,
                                         std::size_t d, std::uint64_t seed) {
  const auto f = register_ffn(ps, prefix, d, d, 1, seed);
  return {f.w1, f.b1, f.w2, f.b2};
}

template <class T>
struct ClassifierOutput {
  Tensor<T> logits;  // [positions, 1]

  std::vector<T> probabilities() const {
    std::vector<T> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = stable_sigmoid(logits[i]);
    return p;
  }
};

// sigmoid(FFNN(h)) per row; rows never mix.
template <class T>
ClassifierOutput<T> classify_mentions(const Tensor<T>& hidden, const ClassifierWeights<T>& w) {
  return {linear(relu(linear(hidden, w.w1, w.b1)), w.w2, w.b2)};
}

template <class T>
MentionMask predict_mask(std::span<const T> probabilities, std::span<const std::uint8_t> valid,
                         std::size_t batch, std::size_t length, double threshold = 0.5) {
  if (probabilities.size() != batch * length || valid.size() != batch * length)
    throw AlignmentError("predict_mask: probabilities and padding mask disagree");
  MentionMask m{batch, length, std::vector<std::uint8_t>(valid.size())};
  for (std::size_t i = 0; i < valid.size(); ++i)
    m.bits[i] = (valid[i] && static_cast<double>(probabilities[i]) >= threshold) ? 1 : 0;
  return m;
}

template <class T>
struct MentionWeights {
  AttentionWeights<T> attn;
  NormWeights<T> attn_norm;
  FeedForwardWeights<T> ffn;
  NormWeights<T> ffn_norm;
  ClassifierWeights<T> src_classifier;
  ClassifierWeights<T> tgt_classifier;
};

// Parameter name prefix shared by every mention-specific array.
inline constexpr const char* kMentionPrefix = "mention.";

template <class T>
MentionWeights<T> register_mention(ParameterSet<T>& ps, std::size_t d, std::size_t d_ffn,
                                   std::uint64_t seed) {
  MentionWeights<T> m;
  m.attn = register_attention(ps, "mention.attn", d, seed);
  m.attn_norm = register_norm(ps, "mention.attn_norm", d);
  m.ffn = register_ffn(ps, "mention.ffn", d, d_ffn, d, seed);
  m.ffn_norm = register_norm(ps, "mention.ffn_norm", d);
  m.src_classifier = register_classifier(ps, "mention.src_classifier", d, seed);
  m.tgt_classifier = register_classifier(ps, "mention.tgt_classifier", d, seed);
  return m;
}

enum class MentionPath {
  full,           // mention attention + second FFNN
  attention_off,  // mention attention sublayer replaced by identity
  bypass,         // whole block skipped, output layer reads the decoder
};

template <class T>
struct MentionBlockOutput {
  Tensor<T> after_attention;  // residual + norm output, before the FFNN
  Tensor<T> output;           // fed to the output layer
  std::shared_ptr<const std::vector<T>> probs;  // [batch, heads, tgt_len, src_len]
};

// decoder_out is the final decoder layer output [batch*tgt_len, d];
// encoder_out is [batch*src_len, d]. A batch item whose mask has no mention
// keeps decoder_out unchanged through the attention sublayer.
template <class T>
MentionBlockOutput<T> mention_attention(const Tensor<T>& decoder_out, const Tensor<T>& encoder_out,
                                        const MentionMask& mask, std::size_t tgt_len,
                                        std::size_t heads, const MentionWeights<T>& w,
                                        DropoutStream& drop,
                                        MentionPath path = MentionPath::full) {
  if (decoder_out.rows() != mask.batch * tgt_len || encoder_out.rows() != mask.batch * mask.length)
    throw DimensionError("mention_attention: hidden states do not match the mask layout");
  MentionBlockOutput<T> out;
  Tensor<T> h = decoder_out;
  if (path == MentionPath::full) {
    AttentionShape shape{mask.batch, tgt_len, mask.length, heads, false, EmptyRows::zero};
    AttentionOutput<T> a = multi_head_attention(decoder_out, encoder_out, mask.bits, shape, w.attn);
    out.probs = a.probs;
    h = norm(add(decoder_out, drop(a.context)), w.attn_norm);
    std::vector<std::uint8_t> keep(decoder_out.rows(), 1);
    bool any_empty = false;
    for (std::size_t b = 0; b < mask.batch; ++b) {
      if (!mask.row_empty(b)) continue;
      any_empty = true;
      std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(b * tgt_len), tgt_len, 0);
    }
    if (any_empty) h = select_rows(h, decoder_out, keep);
  }
  out.after_attention = h;
  out.output = norm(add(h, drop(feed_forward(h, w.ffn))), w.ffn_norm);
  return out;
}

struct LossWeights {
  double mt = 1.0;
  double src = 0.1;
  double tgt = 0.1;
};

inline double combine_losses(double mt, double src, double tgt, const LossWeights& w) {
  return w.mt * mt + w.src * src + w.tgt * tgt;
}

template <class T>
struct JointLoss {
  Tensor<T> total;
  double mt = 0.0;
  double src = 0.0;
  double tgt = 0.0;
};

// L = w.mt * CE(tokens) + w.src * BCE(source tags) + w.tgt * BCE(target tags),
// every term averaged over non-padding positions. Classifier terms are
// skipped when their classifier output is null (baseline architecture).
template <class T>
JointLoss<T> joint_loss(const Tensor<T>& logits, std::span<const std::int32_t> gold_tokens,
                        std::span<const std::uint8_t> tgt_valid,
                        const ClassifierOutput<T>* src_cls, const ClassifierOutput<T>* tgt_cls,
                        std::span<const std::uint8_t> gold_src_tags,
                        std::span<const std::uint8_t> src_valid,
                        std::span<const std::uint8_t> gold_tgt_tags, const LossWeights& weights,
                        double label_smoothing) {
  JointLoss<T> out;
  const Tensor<T> mt = cross_entropy(logits, gold_tokens, tgt_valid, label_smoothing);
  out.mt = static_cast<double>(mt.item());
  out.total = weights.mt == 1.0 ? mt : scale(mt, static_cast<T>(weights.mt));
  if (src_cls) {
    if (gold_src_tags.empty()) throw ContractError("joint_loss: source mention tags missing");
    const Tensor<T> l = binary_cross_entropy(src_cls->logits, gold_src_tags, src_valid);
    out.src = static_cast<double>(l.item());
    if (weights.src != 0.0) out.total = add(out.total, scale(l, static_cast<T>(weights.src)));
  }
  if (tgt_cls) {
    if (gold_tgt_tags.empty()) throw ContractError("joint_loss: target mention tags missing");
    const Tensor<T> l = binary_cross_entropy(tgt_cls->logits, gold_tgt_tags, tgt_valid);
    out.tgt = static_cast<double>(l.item());
    if (weights.tgt != 0.0) out.total = add(out.total, scale(l, static_cast<T>(weights.tgt)));
  }
  return out;
}

}  // namespace mnmt
