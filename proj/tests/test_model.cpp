#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mnmt/checkpoint.hpp"
#include "mnmt/gradcheck.hpp"
#include "mnmt/model.hpp"
#include "oracles.hpp"

using namespace mnmt;
using oracle::Mat;

namespace {

ModelConfig small(Arch arch = Arch::baseline, std::size_t d = 8, std::size_t layers = 1, std::size_t heads = 2) {
  ModelConfig c;
  c.arch = arch;
  c.enc_layers = c.dec_layers = layers;
  c.d_model = d;
  c.d_ffn = 2 * d;
  c.heads = heads;
  c.dropout = 0.0;
  c.vocab_size = 12;
  return c;
}

Example pair(std::vector<std::int32_t> src, std::vector<std::int32_t> tgt) {
  Example e;
  e.src = std::move(src);
  e.tgt = std::move(tgt);
  e.src_tags.assign(e.src.size(), MentionTag::none);
  e.tgt_tags.assign(e.tgt.size(), MentionTag::none);
  return e;
}

// Independent forward pass from named parameter arrays.
struct RefModel {
  const ParameterSet<double>& ps;
  std::size_t d;

  Mat w(const std::string& n) const {
    const auto& t = ps.get(n);
    return oracle::from_flat(t.values(), t.shape()[0], t.shape()[1]);
  }
  std::vector<double> v(const std::string& n) const { return ps.get(n).values(); }

  Mat lin(const Mat& x, const std::string& p) const { return oracle::add_bias(oracle::matmul(x, w(p + ".weight")), v(p + ".bias")); }

  Mat embed(const std::string& table, const std::vector<std::int32_t>& ids) const {
    const auto& e = ps.get(table).values();
    Mat x(ids.size(), std::vector<double>(d));
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) {
        const double angle = static_cast<double>(i) / std::pow(10000.0, static_cast<double>(c - c % 2) / static_cast<double>(d));
        x[i][c] = e[static_cast<std::size_t>(ids[i]) * d + c] * std::sqrt(static_cast<double>(d)) +
                  (c % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
    return x;
  }

  Mat attn(const Mat& q_in, const Mat& kv, const std::string& p,
           const std::function<bool(std::size_t, std::size_t)>& vis) const {
    const Mat ctx = oracle::attention(lin(q_in, p + ".q"), lin(kv, p + ".k"), lin(kv, p + ".v"), vis);
    return lin(ctx, p + ".out");
  }
  Mat ffn(const Mat& x, const std::string& p) const { return lin(oracle::relu(lin(x, p + ".fc1")), p + ".fc2"); }
  Mat ln(const Mat& x, const std::string& p) const { return oracle::layer_norm(x, v(p + ".gain"), v(p + ".bias")); }

  Mat encode(const std::vector<std::int32_t>& src) const {
    Mat x = embed("encoder.embed", src);
    const std::string p = "encoder.layers.0";
    x = ln(oracle::add(x, attn(x, x, p + ".self_attn", [](std::size_t, std::size_t) { return true; })), p + ".self_attn_norm");
    return ln(oracle::add(x, ffn(x, p + ".ffn")), p + ".ffn_norm");
  }

  Mat decode(const std::vector<std::int32_t>& tgt_in, const Mat& enc) const {
    Mat x = embed("decoder.embed", tgt_in);
    const std::string p = "decoder.layers.0";
    x = ln(oracle::add(x, attn(x, x, p + ".self_attn", [](std::size_t i, std::size_t j) { return j <= i; })),
           p + ".self_attn_norm");
    x = ln(oracle::add(x, attn(x, enc, p + ".cross_attn", [](std::size_t, std::size_t) { return true; })),
           p + ".cross_attn_norm");
    return ln(oracle::add(x, ffn(x, p + ".ffn")), p + ".ffn_norm");
  }
};

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("mnmt_model_" + name);
  std::filesystem::remove_all(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Encode, ShapeForTinyConfig) {
  ModelConfig c = ModelConfig::tiny(20);
  c.d_model = 32;
  c.heads = 4;
  const Model<double> m(c, 1);
  const std::vector<Example> ex{pair({5, 6, 7, 8}, {5}), pair({9, 10, 11, 12}, {5})};
  const Batch b = make_batch(ex, false);
  DropoutStream none;
  const auto enc = m.encode(b, none);
  EXPECT_EQ(enc.states.rows(), 2u * 5u);
  EXPECT_EQ(enc.states.cols(), 32u);
  EXPECT_EQ(enc.batch, 2u);
  EXPECT_EQ(enc.length, 5u);
}

TEST(Encode, PaddingDoesNotChangeValidPositions) {
  const Model<double> m(small(Arch::baseline, 8, 2), 2);
  DropoutStream none;
  const std::vector<Example> alone{pair({4, 5, 6}, {7})};
  const std::vector<Example> padded{pair({4, 5, 6}, {7}), pair({4, 5, 6, 7, 8, 9}, {7})};
  const auto a = m.encode(make_batch(alone, false), none);
  const auto p = m.encode(make_batch(padded, false), none);
  for (std::size_t i = 0; i < 4 * 8; ++i) EXPECT_NEAR(a.states[i], p.states[i], 1e-12);
}

TEST(Encode, MatchesHandComposedReference) {
  const Model<double> m(small(Arch::baseline, 4, 1, 1), 3);
  const RefModel ref{m.parameters(), 4};
  const std::vector<Example> ex{pair({4, 9, 5}, {6, 7})};
  const Batch b = make_batch(ex, false);
  DropoutStream none;
  const auto enc = m.encode(b, none);
  const Mat expected = ref.encode({4, 9, 5, kEos});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(enc.states[i * 4 + c], expected[i][c], 1e-10);

  const auto dec = m.decode_base(b.tgt_in, b.tgt_len, b.tgt_valid, enc, none);
  const Mat dexp = ref.decode({kBos, 6, 7}, expected);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(dec[i * 4 + c], dexp[i][c], 1e-10);
}

TEST(Decode, IsCausal) {
  const Model<double> m(small(Arch::baseline, 8, 2), 4);
  DropoutStream none;
  const auto b1 = make_batch(std::vector<Example>{pair({4, 5}, {6, 7, 8, 9})}, false);
  auto b2 = b1;
  b2.tgt_in[4] = 11;  // perturb the last input position
  const auto enc = m.encode(b1, none);
  const auto h1 = m.decode_base(b1.tgt_in, b1.tgt_len, b1.tgt_valid, enc, none);
  const auto h2 = m.decode_base(b2.tgt_in, b2.tgt_len, b2.tgt_valid, enc, none);
  for (std::size_t i = 0; i < 4 * 8; ++i) EXPECT_EQ(h1[i], h2[i]);
  bool changed = false;
  for (std::size_t i = 4 * 8; i < 5 * 8; ++i) changed |= h1[i] != h2[i];
  EXPECT_TRUE(changed);
}

TEST(ProjectOutput, RowsAreLogDistributions) {
  const Model<double> m(small(), 5);
  Rng rng(5);
  const auto h = Tensor<double>::constant({3, 8}, oracle::random_values(rng, 24, 2.0));
  const auto lp = m.project_output(h);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t v = 0; v < 12; ++v) s += std::exp(lp[r * 12 + v]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ProjectOutput, TiedToTargetEmbedding) {
  const Model<double> m(small(), 6);
  Rng rng(6);
  const auto hv = oracle::random_values(rng, 8);
  const auto logits = m.logits(Tensor<double>::constant({1, 8}, hv));
  const auto& e = m.parameters().get("decoder.embed").values();
  for (std::size_t v = 0; v < 12; ++v) {
    double dot = 0;
    for (std::size_t c = 0; c < 8; ++c) dot += hv[c] * e[v * 8 + c];
    EXPECT_NEAR(logits[v], dot, 1e-12);
  }
}

TEST(ProjectOutput, ArgmaxInvariantToLogitShift) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    auto z = oracle::random_values(rng, 10, 3.0);
    const auto a = log_softmax(Tensor<double>::constant({1, 10}, z));
    for (auto& x : z) x += 5.0;
    const auto b = log_softmax(Tensor<double>::constant({1, 10}, z));
    const auto am = std::max_element(a.values().begin(), a.values().end()) - a.values().begin();
    const auto bm = std::max_element(b.values().begin(), b.values().end()) - b.values().begin();
    EXPECT_EQ(am, bm);
  }
}

TEST(Forward, PathsDifferOnlyAboveDecoder) {
  const Model<double> m(small(Arch::mention), 8);
  const auto b = make_batch(std::vector<Example>{pair({4, 5, 6}, {7, 8})}, true);
  ForwardOptions opt;
  opt.path = MentionPath::bypass;
  const auto bypass = m.forward(b, opt);
  const auto plain = m.logits(bypass.decoder_out);
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(bypass.logits[i], plain[i]);
  opt.path = MentionPath::full;
  const auto full = m.forward(b, opt);
  for (std::size_t i = 0; i < full.decoder_out.size(); ++i) EXPECT_EQ(full.decoder_out[i], bypass.decoder_out[i]);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const Model<double> m(small(Arch::mention), 9);
  const auto dir = temp_dir("rt");
  save_checkpoint(m, dir);
  const auto loaded = model_from_checkpoint<double>(load_checkpoint(dir));
  ASSERT_EQ(loaded.parameters().names(), m.parameters().names());
  for (std::size_t p = 0; p < m.parameters().size(); ++p)
    EXPECT_EQ(loaded.parameters().tensors()[p].values(), m.parameters().tensors()[p].values());
  const auto dir2 = temp_dir("rt2");
  save_checkpoint(loaded, dir2);
  EXPECT_EQ(slurp(dir / "params.bin"), slurp(dir2 / "params.bin"));
}

TEST(Checkpoint, FloatWidensAndNarrowsExactly) {
  const Model<float> m(small(), 10);
  const auto dir = temp_dir("f32");
  save_checkpoint(m, dir);
  const auto loaded = model_from_checkpoint<float>(load_checkpoint(dir));
  for (std::size_t p = 0; p < m.parameters().size(); ++p)
    EXPECT_EQ(loaded.parameters().tensors()[p].values(), m.parameters().tensors()[p].values());
}

TEST(WarmStart, CopiesSharedArraysAndLeavesMentionFresh) {
  const Model<double> base(small(), 11);
  const auto dir = temp_dir("ws");
  save_checkpoint(base, dir);
  Model<double> ext(small(Arch::mention), 12);
  const Model<double> fresh_ref(small(Arch::mention), 12);
  const auto report = warm_start(ext, load_checkpoint(dir));
  EXPECT_EQ(report.copied, base.parameters().names());
  EXPECT_EQ(report.fresh, ext.mention_parameter_names());
  EXPECT_TRUE(report.ignored.empty());
  for (const auto& n : report.copied) EXPECT_EQ(ext.parameters().get(n).values(), base.parameters().get(n).values());
  for (const auto& n : report.fresh) EXPECT_EQ(ext.parameters().get(n).values(), fresh_ref.parameters().get(n).values());
}

TEST(WarmStart, BypassReproducesBaselineForward) {
  const Model<double> base(small(Arch::baseline, 8, 2), 13);
  const auto dir = temp_dir("ws_fwd");
  save_checkpoint(base, dir);
  Model<double> ext(small(Arch::mention, 8, 2), 14);
  warm_start(ext, load_checkpoint(dir));
  const auto b = make_batch(std::vector<Example>{pair({4, 5, 6}, {7, 8}), pair({9, 10}, {11})}, true);
  ForwardOptions opt;
  opt.path = MentionPath::bypass;
  const auto a = base.forward(b, {});
  const auto e = ext.forward(b, opt);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_NEAR(a.logits[i], e.logits[i], 1e-12);
}

TEST(WarmStart, ShapeMismatchNamesTheArray) {
  Model<double> base(small(), 15);
  const auto dir = temp_dir("bad");
  save_checkpoint(base, dir);
  auto ck = load_checkpoint(dir);
  ck.arrays["decoder.layers.0.ffn.fc1.bias"].shape = {3};
  ck.arrays["decoder.layers.0.ffn.fc1.bias"].values.resize(3);
  Model<double> ext(small(Arch::mention), 16);
  try {
    warm_start(ext, ck);
    FAIL() << "expected IncompatibleCheckpoint";
  } catch (const IncompatibleCheckpoint& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.layers.0.ffn.fc1.bias"), std::string::npos);
  }
  ModelConfig wide = small(Arch::mention, 16);
  Model<double> other(wide, 17);
  EXPECT_THROW(warm_start(other, load_checkpoint(dir)), IncompatibleCheckpoint);
}

TEST(Config, RejectsIndivisibleHeadsAndPerLayer) {
  ModelConfig c = small();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small();
  c.per_layer = true;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(GradCheck, FullBaselineLoss) {
  const auto r = grad_check(ModelConfig::tiny(30), 1, 20);
  EXPECT_EQ(r.probes.size(), 20u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
