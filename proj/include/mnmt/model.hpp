#pragma once

// Post-norm Transformer encoder-decoder with tied target embedding and
// output projection, optionally extended with the mention block.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mnmt/batch.hpp"
#include "mnmt/layers.hpp"
#include "mnmt/mention.hpp"

namespace mnmt {

enum class Arch { baseline, mention };

inline std::string to_string(Arch a) { return a == Arch::mention ? "mention" : "baseline"; }
inline Arch parse_arch(const std::string& s) {
  if (s == "baseline") return Arch::baseline;
  if (s == "mention") return Arch::mention;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected baseline|mention)");
}

struct ModelConfig {
  Arch arch = Arch::baseline;
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t d_model = 512;
  std::size_t d_ffn = 2048;
  std::size_t heads = 8;
  double dropout = 0.1;
  std::size_t vocab_size = 0;  // joint source/target vocabulary
  double label_smoothing = 0.1;
  double mention_threshold = 0.5;
  bool per_layer = false;  // reserved; only the single top block exists

  static ModelConfig tiny(std::size_t vocab, Arch arch = Arch::baseline) {
    ModelConfig c;
    c.arch = arch;
    c.enc_layers = c.dec_layers = 2;
    c.d_model = 64;
    c.d_ffn = 128;
    c.heads = 4;
    c.vocab_size = vocab;
    return c;
  }

  void validate() const {
    if (heads == 0 || d_model % heads != 0)
      throw std::invalid_argument("d_model must be divisible by heads");
    if (vocab_size <= 4) throw std::invalid_argument("vocabulary must contain non-reserved entries");
    if (enc_layers == 0 || dec_layers == 0 || d_ffn == 0)
      throw std::invalid_argument("layer counts and widths must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
    if (per_layer) throw std::invalid_argument("per-layer mention attention is not supported");
  }

  // Same shapes for every array the two architectures share.
  bool shares_shapes_with(const ModelConfig& o) const {
    return enc_layers == o.enc_layers && dec_layers == o.dec_layers && d_model == o.d_model &&
           d_ffn == o.d_ffn && heads == o.heads && vocab_size == o.vocab_size;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"arch", to_string(c.arch)},       {"enc_layers", c.enc_layers},
       {"dec_layers", c.dec_layers},      {"d_model", c.d_model},
       {"d_ffn", c.d_ffn},                {"heads", c.heads},
       {"dropout", c.dropout},            {"vocab_size", c.vocab_size},
       {"label_smoothing", c.label_smoothing},
       {"mention_threshold", c.mention_threshold},
       {"per_layer", c.per_layer}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.arch = parse_arch(j.at("arch").get<std::string>());
  j.at("enc_layers").get_to(c.enc_layers);
  j.at("dec_layers").get_to(c.dec_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("heads").get_to(c.heads);
  j.at("dropout").get_to(c.dropout);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("label_smoothing").get_to(c.label_smoothing);
  c.mention_threshold = j.value("mention_threshold", 0.5);
  c.per_layer = j.value("per_layer", false);
}

template <class T>
struct EncoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm2;
};

template <class T>
struct DecoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  AttentionWeights<T> cross_attn;
  NormWeights<T> norm2;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm3;
};

template <class T>
struct EncoderStates {
  Tensor<T> states;  // [batch*length, d_model]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> valid;  // [batch*length]; 0 marks padding
};

// Source-side mention mask policy for a forward pass.
enum class MaskSource { gold, predicted };

inline std::string to_string(MaskSource m) { return m == MaskSource::gold ? "gold" : "predicted"; }
inline MaskSource parse_mask_source(const std::string& s) {
  if (s == "gold") return MaskSource::gold;
  if (s == "predicted") return MaskSource::predicted;
  throw std::invalid_argument("unknown mask mode '" + s + "' (expected predicted|gold)");
}

struct ForwardOptions {
  bool train = false;  // dropout on
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  MentionPath path = MentionPath::full;
  MaskSource mask_source = MaskSource::gold;
};

template <class T>
struct ForwardResult {
  EncoderStates<T> enc;
  Tensor<T> decoder_out;  // final decoder layer output
  Tensor<T> logits;       // [batch*tgt_len, vocab]
  std::optional<ClassifierOutput<T>> src_cls;
  std::optional<ClassifierOutput<T>> tgt_cls;
  MentionMask mask;
  std::shared_ptr<const std::vector<T>> mention_probs;
};

template <class T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.d_model, v = config_.vocab_size;
    src_embed_ = params_.add("encoder.embed", {v, d},
                             init_values<T>(Init::normal_embedding, {v, d}, seed, "encoder.embed"));
    tgt_embed_ = params_.add("decoder.embed", {v, d},
                             init_values<T>(Init::normal_embedding, {v, d}, seed, "decoder.embed"));
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string p = "encoder.layers." + std::to_string(l);
      EncoderLayerWeights<T> w;
      w.self_attn = register_attention(params_, p + ".self_attn", d, seed);
      w.norm1 = register_norm(params_, p + ".self_attn_norm", d);
      w.ffn = register_ffn(params_, p + ".ffn", d, config_.d_ffn, d, seed);
      w.norm2 = register_norm(params_, p + ".ffn_norm", d);
      encoder_.push_back(w);
    }
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string p = "decoder.layers." + std::to_string(l);
      DecoderLayerWeights<T> w;
      w.self_attn = register_attention(params_, p + ".self_attn", d, seed);
      w.norm1 = register_norm(params_, p + ".self_attn_norm", d);
      w.cross_attn = register_attention(params_, p + ".cross_attn", d, seed);
      w.norm2 = register_norm(params_, p + ".cross_attn_norm", d);
      w.ffn = register_ffn(params_, p + ".ffn", d, config_.d_ffn, d, seed);
      w.norm3 = register_norm(params_, p + ".ffn_norm", d);
      decoder_.push_back(w);
    }
    if (config_.arch == Arch::mention) mention_ = register_mention(params_, d, config_.d_ffn, seed);
  }

  // Weight views alias the parameter set, so copies would silently share.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  bool has_mention() const { return mention_.has_value(); }
  const MentionWeights<T>& mention_weights() const { return mention_.value(); }
  const std::vector<DecoderLayerWeights<T>>& decoder_layers() const { return decoder_; }

  // Names of the mention-specific arrays (empty for the baseline).
  std::vector<std::string> mention_parameter_names() const {
    std::vector<std::string> out;
    const std::string prefix = kMentionPrefix;
    for (const auto& n : params_.names())
      if (n.compare(0, prefix.size(), prefix) == 0) out.push_back(n);
    return out;
  }

  EncoderStates<T> encode(std::span<const std::int32_t> src, std::size_t batch, std::size_t len,
                          std::span<const std::uint8_t> valid, DropoutStream& drop) const {
    if (src.size() != batch * len || valid.size() != batch * len)
      throw DimensionError("encode: source ids do not match batch layout");
    EncoderStates<T> enc;
    enc.batch = batch;
    enc.length = len;
    enc.valid.assign(valid.begin(), valid.end());
    Tensor<T> x = embed(src_embed_, src, batch, len, drop);
    const AttentionShape shape{batch, len, len, config_.heads, false, EmptyRows::error};
    for (const auto& w : encoder_) {
      x = norm(add(x, drop(multi_head_attention(x, x, valid, shape, w.self_attn).context)), w.norm1);
      x = norm(add(x, drop(feed_forward(x, w.ffn))), w.norm2);
    }
    enc.states = x;
    return enc;
  }

  EncoderStates<T> encode(const Batch& b, DropoutStream& drop) const {
    return encode(b.src, b.size, b.src_len, b.src_valid, drop);
  }

  // Output of the last decoder layer's feed-forward sublayer (post
  // residual and norm), before any projection to the vocabulary.
  Tensor<T> decode_base(std::span<const std::int32_t> tgt_in, std::size_t tgt_len,
                        std::span<const std::uint8_t> tgt_valid, const EncoderStates<T>& enc,
                        DropoutStream& drop) const {
    if (tgt_in.size() != enc.batch * tgt_len || tgt_valid.size() != tgt_in.size())
      throw DimensionError("decode: target ids do not match batch layout");
    Tensor<T> x = embed(tgt_embed_, tgt_in, enc.batch, tgt_len, drop);
    const AttentionShape self_shape{enc.batch, tgt_len, tgt_len, config_.heads, true, EmptyRows::error};
    const AttentionShape cross_shape{enc.batch, tgt_len, enc.length, config_.heads, false,
                                     EmptyRows::error};
    for (const auto& w : decoder_) {
      x = norm(add(x, drop(multi_head_attention(x, x, tgt_valid, self_shape, w.self_attn).context)),
               w.norm1);
      x = norm(add(x, drop(multi_head_attention(x, enc.states, enc.valid, cross_shape, w.cross_attn)
                               .context)),
               w.norm2);
      x = norm(add(x, drop(feed_forward(x, w.ffn))), w.norm3);
    }
    return x;
  }

  Tensor<T> logits(const Tensor<T>& hidden) const { return matmul(hidden, tgt_embed_, true); }

  // Token log-probabilities [rows, vocab].
  Tensor<T> project_output(const Tensor<T>& hidden) const { return log_softmax(logits(hidden)); }

  ClassifierOutput<T> classify_source(const Tensor<T>& enc_states) const {
    return classify_mentions(enc_states, mention_weights().src_classifier);
  }
  ClassifierOutput<T> classify_target(const Tensor<T>& decoder_out) const {
    return classify_mentions(decoder_out, mention_weights().tgt_classifier);
  }

  MentionMask predict_mask(const EncoderStates<T>& enc, double threshold) const {
    const auto probs = classify_source(enc.states).probabilities();
    return mnmt::predict_mask<T>(probs, enc.valid, enc.batch, enc.length, threshold);
  }
  MentionMask predict_mask(const EncoderStates<T>& enc) const {
    return predict_mask(enc, config_.mention_threshold);
  }

  // Everything above the base decoder: the mention block (unless bypassed)
  // and the output logits.
  Tensor<T> head(const Tensor<T>& decoder_out, const EncoderStates<T>& enc, const MentionMask* mask,
                 std::size_t tgt_len, MentionPath path, DropoutStream& drop,
                 std::shared_ptr<const std::vector<T>>* probs = nullptr) const {
    if (!has_mention() || path == MentionPath::bypass) return logits(decoder_out);
    if (!mask) throw ContractError("mention architecture needs a source mention mask");
    auto block = mention_attention(decoder_out, enc.states, *mask, tgt_len, config_.heads,
                                   mention_weights(), drop, path);
    if (probs) *probs = block.probs;
    return logits(block.output);
  }

  ForwardResult<T> forward(const Batch& b, const ForwardOptions& opt) const {
    DropoutStream drop(opt.train ? config_.dropout : 0.0, opt.seed, opt.step);
    ForwardResult<T> r;
    r.enc = encode(b, drop);
    r.decoder_out = decode_base(b.tgt_in, b.tgt_len, b.tgt_valid, r.enc, drop);
    if (!has_mention()) {
      r.logits = logits(r.decoder_out);
      return r;
    }
    r.src_cls = classify_source(r.enc.states);
    r.tgt_cls = classify_target(r.decoder_out);
    if (opt.mask_source == MaskSource::gold) {
      if (!b.has_tags) throw ContractError("gold mention mask requested for an untagged batch");
      r.mask = build_mask_from_tags(b.src_tags, b.src_valid, b.size, b.src_len);
    } else {
      const auto probs = r.src_cls->probabilities();
      r.mask = mnmt::predict_mask<T>(probs, r.enc.valid, b.size, b.src_len,
                                     config_.mention_threshold);
    }
    r.logits = head(r.decoder_out, r.enc, &r.mask, b.tgt_len, opt.path, drop, &r.mention_probs);
    return r;
  }

  JointLoss<T> loss(const Batch& b, const ForwardResult<T>& r, const LossWeights& w,
                    double label_smoothing) const {
    const bool tags = b.has_tags;
    return joint_loss(r.logits, b.tgt_out, b.tgt_valid, r.src_cls ? &*r.src_cls : nullptr,
                      r.tgt_cls ? &*r.tgt_cls : nullptr,
                      tags ? std::span<const std::uint8_t>(b.src_tags) : std::span<const std::uint8_t>(),
                      b.src_valid,
                      tags ? std::span<const std::uint8_t>(b.tgt_tags) : std::span<const std::uint8_t>(),
                      w, label_smoothing);
  }

 private:
  Tensor<T> embed(const Tensor<T>& table, std::span<const std::int32_t> ids, std::size_t batch,
                  std::size_t len, DropoutStream& drop) const {
    const std::size_t d = config_.d_model;
    const std::vector<T> pe = positional_encoding<T>(len, d);
    std::vector<T> pos(batch * len * d);
    for (std::size_t b = 0; b < batch; ++b) std::copy(pe.begin(), pe.end(), pos.begin() + b * len * d);
    Tensor<T> x = scale(embedding(table, ids), static_cast<T>(std::sqrt(static_cast<double>(d))));
    return drop(add_constant<T>(x, pos));
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  Tensor<T> src_embed_, tgt_embed_;
  std::vector<EncoderLayerWeights<T>> encoder_;
  std::vector<DecoderLayerWeights<T>> decoder_;
  std::optional<MentionWeights<T>> mention_;
};

}  // namespace mnmt
