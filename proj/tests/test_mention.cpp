#include <gtest/gtest.h>

#include "mnmt/gradcheck.hpp"
#include "mnmt/mention.hpp"
#include "mnmt/model.hpp"
#include "mnmt/train.hpp"
#include "oracles.hpp"

using namespace mnmt;

namespace {

constexpr auto M = MentionTag::mention;
constexpr auto N = MentionTag::none;

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

void set(Tensor<double>& t, std::vector<double> v) {
  ASSERT_EQ(t.size(), v.size());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

MentionWeights<double> weights(ParameterSet<double>& ps, std::size_t d, std::uint64_t seed = 1) {
  return register_mention(ps, d, 2 * d, seed);
}

Tensor<double> random_tensor(Rng& rng, std::size_t rows, std::size_t cols) {
  return Tensor<double>::constant({rows, cols}, oracle::random_values(rng, rows * cols));
}

ModelConfig small_mention() {
  ModelConfig c = ModelConfig::tiny(16, Arch::mention);
  c.d_model = 8;
  c.d_ffn = 16;
  c.heads = 2;
  c.enc_layers = c.dec_layers = 1;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(BuildMask, TagsAndPadding) {
  const auto tags = bits({1, 0, 1, 1, 1, 1});
  const auto valid = bits({1, 1, 0, 1, 1, 1});
  const auto m = build_mask_from_tags(tags, valid, 2, 3);
  EXPECT_EQ(m.bits, bits({1, 0, 0, 1, 1, 1}));
  const auto none = build_mask_from_tags(bits({0, 0, 0}), bits({1, 1, 1}), 1, 3);
  EXPECT_TRUE(none.row_empty(0));
  const auto all = build_mask_from_tags(bits({1, 1, 1, 1}), bits({1, 1, 0, 0}), 1, 4);
  EXPECT_EQ(all.bits, bits({1, 1, 0, 0}));
}

TEST(BuildMask, RandomMatchesElementwiseOracle) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::uint8_t> tags(12), valid(12);
    for (std::size_t i = 0; i < 12; ++i) {
      tags[i] = rng.uniform() < 0.5;
      valid[i] = rng.uniform() < 0.8;
    }
    const auto m = build_mask_from_tags(tags, valid, 3, 4);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(m.bits[i], tags[i] && valid[i] ? 1 : 0);
  }
}

TEST(BuildMask, LengthMismatchIsAlignmentError) {
  EXPECT_THROW(build_mask_from_tags(bits({1, 0}), bits({1, 1, 1}), 1, 3), AlignmentError);
}

TEST(PredictMask, Thresholding) {
  const std::vector<double> p{0.9, 0.1, 0.7};
  EXPECT_EQ(predict_mask<double>(p, bits({1, 1, 1}), 1, 3, 0.5).bits, bits({1, 0, 1}));
  EXPECT_EQ(predict_mask<double>(p, bits({1, 1, 0}), 1, 3, 0.0).bits, bits({1, 1, 0}));
}

TEST(Classifier, ZeroWeightsGiveOneHalf) {
  ParameterSet<double> ps;
  auto w = register_classifier(ps, "c", 4, 1);
  for (auto& t : ps.tensors()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  Rng rng(3);
  const auto out = classify_mentions(random_tensor(rng, 5, 4), w).probabilities();
  for (double p : out) EXPECT_EQ(p, 0.5);
}

TEST(Classifier, HandOracleD4) {
  ParameterSet<double> ps;
  auto w = register_classifier(ps, "c", 4, 1);
  set(w.w1, {1, 0, 0, -1, 0, 2, 0, 0, 0, 0, -1, 0, 0.5, 0, 0, 1});
  set(w.b1, {0.1, -0.2, 0.3, 0});
  set(w.w2, {1, -1, 0.5, 2});
  set(w.b2, {-0.25});
  const std::vector<double> h{0.3, -0.7, 1.1, 0.4};
  // Hidden: [0.3+0.2+0.1, -1.4-0.2, -1.1+0.3, -0.3+0.4] -> ReLU [0.6, 0, 0, 0.1]
  const double z = 0.6 * 1 + 0.1 * 2 - 0.25;
  const auto p = classify_mentions(Tensor<double>::constant({1, 4}, h), w).probabilities();
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-z)), 1e-9);
}

TEST(Classifier, PermutationEquivariantAndPure) {
  ParameterSet<double> ps;
  auto w = register_classifier(ps, "c", 6, 4);
  Rng rng(4);
  const auto h = random_tensor(rng, 5, 6);
  const auto base = classify_mentions(h, w).probabilities();
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> hp(30);
  for (std::size_t i = 0; i < 5; ++i) std::copy_n(h.values().begin() + perm[i] * 6, 6, hp.begin() + i * 6);
  const auto pp = classify_mentions(Tensor<double>::constant({5, 6}, hp), w).probabilities();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pp[i], base[perm[i]]);

  auto hv = h.values();
  for (std::size_t c = 0; c < 6; ++c) hv[2 * 6 + c] += 0.5;
  const auto pert = classify_mentions(Tensor<double>::constant({5, 6}, hv), w).probabilities();
  for (std::size_t i = 0; i < 5; ++i) {
    if (i != 2) {
      EXPECT_EQ(pert[i], base[i]);
    }
  }
}

TEST(MentionAttention, OneMentionGivesOneHotRows) {
  ParameterSet<double> ps;
  const auto w = weights(ps, 8, 5);
  Rng rng(5);
  const auto dec = random_tensor(rng, 3, 8), enc = random_tensor(rng, 4, 8);
  const MentionMask mask{1, 4, bits({0, 0, 1, 0})};
  DropoutStream none;
  const auto out = mention_attention(dec, enc, mask, 3, 2, w, none);
  const auto& p = *out.probs;
  for (std::size_t row = 0; row < 2 * 3; ++row)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(p[row * 4 + j], j == 2 ? 1.0 : 0.0);
}

TEST(MentionAttention, AllOnesEqualsStandardCrossAttention) {
  ParameterSet<double> ps;
  const auto w = weights(ps, 8, 6);
  Rng rng(6);
  const auto dec = random_tensor(rng, 6, 8), enc = random_tensor(rng, 8, 8);
  const MentionMask mask{2, 4, std::vector<std::uint8_t>(8, 1)};
  DropoutStream none;
  const auto out = mention_attention(dec, enc, mask, 3, 2, w, none);
  const AttentionShape shape{2, 3, 4, 2, false, EmptyRows::error};
  const auto std_attn = multi_head_attention(dec, enc, std::vector<std::uint8_t>(8, 1), shape, w.attn);
  const auto expected = norm(add(dec, std_attn.context), w.attn_norm);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.after_attention[i], expected[i], 1e-6);
}

TEST(MentionAttention, TwoWayHandOracle) {
  ParameterSet<double> ps;
  auto w = weights(ps, 2);
  set(w.attn.wq, {1, 0, 0, 1});
  set(w.attn.wk, {1, 0, 0, 1});
  set(w.attn.wv, {1, 0, 0, 1});
  set(w.attn.wo, {1, 0, 0, 1});
  const auto dec = Tensor<double>::constant({1, 2}, {1.0, 2.0});
  const auto enc = Tensor<double>::constant({3, 2}, {0.5, 0.0, 9.0, 9.0, 0.0, 1.0});
  const MentionMask mask{1, 3, bits({1, 0, 1})};
  DropoutStream none;
  const auto out = mention_attention(dec, enc, mask, 1, 1, w, none);
  // Scores q.k / sqrt(2): 0.5/sqrt2 and 2/sqrt2.
  const double s0 = 0.5 / std::sqrt(2.0), s2 = 2.0 / std::sqrt(2.0);
  const double p0 = 1.0 / (1.0 + std::exp(s2 - s0));
  const auto& p = *out.probs;
  EXPECT_NEAR(p[0], p0, 1e-12);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[2], 1.0 - p0, 1e-12);
  const oracle::Mat ctx{{1.0 + 0.5 * p0, 2.0 + (1.0 - p0)}};
  const auto expected = oracle::layer_norm(ctx, {1, 1}, {0, 0});
  EXPECT_NEAR(out.after_attention[0], expected[0][0], 1e-9);
  EXPECT_NEAR(out.after_attention[1], expected[0][1], 1e-9);
}

TEST(MentionAttention, EmptyRowEqualsAttentionOffPath) {
  ParameterSet<double> ps;
  const auto w = weights(ps, 8, 7);
  Rng rng(7);
  const auto dec = random_tensor(rng, 6, 8), enc = random_tensor(rng, 8, 8);
  const MentionMask mask{2, 4, bits({1, 0, 1, 0, 0, 0, 0, 0})};
  DropoutStream none;
  const auto full = mention_attention(dec, enc, mask, 3, 2, w, none);
  const auto off = mention_attention(dec, enc, mask, 3, 2, w, none, MentionPath::attention_off);
  for (std::size_t i = 3 * 8; i < 6 * 8; ++i) {
    EXPECT_NEAR(full.output[i], off.output[i], 1e-12);
    EXPECT_EQ(full.after_attention[i], dec[i]);
  }
  bool differs = false;
  for (std::size_t i = 0; i < 3 * 8; ++i) differs |= full.output[i] != off.output[i];
  EXPECT_TRUE(differs);
}

TEST(MentionAttention, RandomMaskInvariants) {
  ParameterSet<double> ps;
  const auto w = weights(ps, 8, 8);
  Rng rng(8);
  DropoutStream none;
  for (int t = 0; t < 100; ++t) {
    const std::size_t batch = 1 + rng.below(3), tl = 1 + rng.below(4), sl = 1 + rng.below(5);
    MentionMask mask{batch, sl, std::vector<std::uint8_t>(batch * sl)};
    for (auto& b : mask.bits) b = rng.uniform() < 0.4;
    const auto out = mention_attention(random_tensor(rng, batch * tl, 8), random_tensor(rng, batch * sl, 8), mask, tl,
                                       2, w, none);
    const auto& p = *out.probs;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t row = 0; row < 2 * tl; ++row) {
        double s = 0;
        for (std::size_t j = 0; j < sl; ++j) {
          const double pj = p[(b * 2 * tl + row) * sl + j];
          if (!mask.at(b, j)) {
            EXPECT_EQ(pj, 0.0);
          }
          s += pj;
        }
        if (!mask.row_empty(b)) {
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
      }
  }
}

TEST(JointLoss, WeightArithmetic) {
  EXPECT_NEAR(combine_losses(2.4, 0.6, 0.3, LossWeights{}), 2.49, 1e-12);
  EXPECT_EQ(combine_losses(2.4, 0.0, 0.0, LossWeights{}), 2.4);
}

TEST(JointLoss, ComponentsMatchRecomputation) {
  Rng rng(9);
  const std::size_t vocab = 6;
  // Two sentences, target length 3, second padded after two tokens.
  const auto logits = random_tensor(rng, 6, vocab);
  const std::vector<std::int32_t> gold{4, 5, 2, 3, 2, 0};
  const auto tvalid = bits({1, 1, 1, 1, 1, 0});
  const auto svalid = bits({1, 1, 1, 1, 0, 0});
  const auto stags = bits({1, 0, 1, 0, 0, 0});
  const auto ttags = bits({0, 1, 0, 1, 0, 0});
  const ClassifierOutput<double> src{random_tensor(rng, 6, 1)};
  const ClassifierOutput<double> tgt{random_tensor(rng, 6, 1)};
  const auto l = joint_loss(logits, gold, tvalid, &src, &tgt, stags, svalid, ttags, LossWeights{}, 0.0);

  double ce = 0, bs = 0, bt = 0;
  for (std::size_t r = 0; r < 5; ++r) {
    const std::vector<double> row(logits.values().begin() + r * vocab, logits.values().begin() + (r + 1) * vocab);
    ce -= oracle::log_softmax_at(row, static_cast<std::size_t>(gold[r]));
  }
  ce /= 5;
  auto bce = [](double z, int y) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    return -(y ? std::log(p) : std::log(1.0 - p));
  };
  for (std::size_t r = 0; r < 4; ++r) bs += bce(src.logits[r], stags[r]);
  for (std::size_t r = 0; r < 5; ++r) bt += bce(tgt.logits[r], ttags[r]);
  bs /= 4;
  bt /= 5;
  EXPECT_NEAR(l.mt, ce, 1e-10);
  EXPECT_NEAR(l.src, bs, 1e-10);
  EXPECT_NEAR(l.tgt, bt, 1e-10);
  EXPECT_NEAR(l.total.item(), ce + 0.1 * bs + 0.1 * bt, 1e-10);

  const std::span<const std::uint8_t> no_tags;
  const auto base = joint_loss<double>(logits, gold, tvalid, nullptr, nullptr, no_tags, svalid, no_tags,
                                       LossWeights{}, 0.0);
  EXPECT_NEAR(base.total.item(), ce, 1e-12);
}

TEST(JointLoss, MissingTagsIsContractError) {
  const Model<double> m(small_mention(), 1);
  Example e{{4, 5}, {}, {6}, {}};
  const Batch b = make_batch(std::vector<Example>{e}, false);
  ForwardOptions opt;
  opt.mask_source = MaskSource::predicted;
  const auto r = m.forward(b, opt);
  EXPECT_THROW(m.loss(b, r, LossWeights{}, 0.1), ContractError);
  opt.mask_source = MaskSource::gold;
  EXPECT_THROW(m.forward(b, opt), ContractError);
}

TEST(MentionModel, EveryMentionArrayReceivesGradient) {
  Model<double> m(small_mention(), 2);
  Example e{{4, 5, 6}, {M, N, M}, {7, 8}, {M, N}};
  const Batch b = make_batch(std::vector<Example>{e}, true);
  TrainConfig cfg;
  cfg.warmup_steps = 10;
  TrainState<double> state(cfg);
  train_step(m, b, cfg, state);
  for (const auto& n : m.mention_parameter_names()) {
    const auto& t = m.parameters().get(n);
    ASSERT_TRUE(t.has_grad()) << n;
    double norm2 = 0;
    for (double g : t.grad()) norm2 += g * g;
    EXPECT_GT(norm2, 0.0) << n;
  }
}

TEST(MentionModel, ZeroMaskRowsMatchAttentionOffLogits) {
  const Model<double> m(small_mention(), 3);
  Example a{{4, 5, 6}, {M, N, M}, {7, 8}, {N, N}};
  Example z{{9, 10}, {N, N}, {11}, {N}};
  const Batch b = make_batch(std::vector<Example>{a, z}, true);
  ForwardOptions opt;
  const auto full = m.forward(b, opt);
  opt.path = MentionPath::attention_off;
  const auto off = m.forward(b, opt);
  const std::size_t v = m.config().vocab_size;
  for (std::size_t i = b.tgt_len * v; i < 2 * b.tgt_len * v; ++i) EXPECT_NEAR(full.logits[i], off.logits[i], 1e-6);
}

TEST(MentionModel, FiniteDifferenceGradients) {
  const auto r = grad_check(ModelConfig::tiny(40, Arch::mention), 5, 20);
  EXPECT_EQ(r.mention_arrays_probed.size(), 24u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
