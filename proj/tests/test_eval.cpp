#include <gtest/gtest.h>

#include <filesystem>

#include "mnmt/eval.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/synth.hpp"
#include "mnmt/text.hpp"

using namespace mnmt;

namespace {

Corpus corpus(std::initializer_list<const char*> lines) {
  Corpus c;
  for (const char* l : lines) c.push_back(split_ws(l));
  return c;
}

Alignment identity(std::size_t n) {
  Alignment a;
  for (std::size_t i = 0; i < n; ++i) a.emplace_back(i, i);
  return a;
}

// Scores a target by a fixed per-sentence table; unknown strings get 0.
SequenceScorer table_scorer(std::map<std::string, double> table, double shift = 0.0) {
  return [table = std::move(table), shift](const std::string&, const std::vector<std::string>& targets) {
    std::vector<double> out;
    for (const auto& t : targets) {
      auto it = table.find(t);
      out.push_back((it == table.end() ? 0.0 : it->second) + shift);
    }
    return out;
  };
}

}  // namespace

TEST(Bleu, IdentityIsHundred) {
  const auto c = corpus({"der hund ist rot .", "sie sieht ihn neben dem tisch ."});
  EXPECT_NEAR(bleu(c, c).score, 100.0, 1e-9);
}

TEST(Bleu, NoFourGramMatchIsZero) {
  const auto cand = corpus({"a b c x e f g"});
  const auto ref = corpus({"a b c d e f g"});
  const auto r = bleu(cand, ref);
  EXPECT_EQ(r.precisions[3], 0.0);
  EXPECT_EQ(r.score, 0.0);
}

TEST(Bleu, HandComputedSentence) {
  // Precisions 5/5, 3/4, 2/3, 1/2; BP = exp(1 - 6/5).
  const auto r = bleu(corpus({"the cat sat on mat"}), corpus({"the cat sat on the mat"}));
  EXPECT_NEAR(r.precisions[0], 1.0, 1e-12);
  EXPECT_NEAR(r.precisions[1], 0.75, 1e-12);
  EXPECT_NEAR(r.precisions[2], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.precisions[3], 0.5, 1e-12);
  EXPECT_NEAR(r.brevity_penalty, std::exp(-0.2), 1e-12);
  EXPECT_NEAR(r.score, 57.89300674674099, 1e-4);
}

TEST(Bleu, CorpusStatisticsPoolBeforeAveraging) {
  // Pooled matches 8/9, 5/7, 3/5, 2/3 over both lines; lengths 9 vs 10.
  const auto r = bleu(corpus({"a b c d e", "x y z w"}), corpus({"a b c d e", "x y q w v"}));
  const double expected =
      100 * std::exp(1 - 10.0 / 9.0) * std::pow(8.0 / 9 * 5.0 / 7 * 3.0 / 5 * 2.0 / 3, 0.25);
  EXPECT_NEAR(r.score, expected, 1e-9);
}

TEST(Bleu, ClipsRepeatedNgrams) {
  const auto r = bleu(corpus({"the the the the"}), corpus({"the cat"}), true);
  EXPECT_NEAR(r.precisions[0], 0.25, 1e-12);
}

TEST(Bleu, LinePermutationSymmetry) {
  Rng rng(1);
  Corpus cand, ref;
  for (int i = 0; i < 30; ++i) {
    std::vector<std::string> r, c;
    for (std::size_t k = 0; k < 3 + rng.below(6); ++k) r.push_back(std::string(1, static_cast<char>('a' + rng.below(5))));
    c = r;
    if (rng.uniform() < 0.5) c[rng.below(c.size())] = "z";
    cand.push_back(c);
    ref.push_back(r);
  }
  const double base = bleu(cand, ref).score;
  for (std::size_t i = cand.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(cand[i - 1], cand[j]);
    std::swap(ref[i - 1], ref[j]);
  }
  EXPECT_NEAR(bleu(cand, ref).score, base, 1e-9);
}

TEST(Bleu, InputErrors) {
  EXPECT_THROW(bleu({}, {}), std::invalid_argument);
  EXPECT_THROW(bleu(corpus({"a"}), corpus({"a", "b"})), std::invalid_argument);
}

TEST(Alignment, ParseFormatRoundTrip) {
  const auto a = parse_alignment("0-0 1-2 2-1");
  EXPECT_EQ(a, (Alignment{{0, 0}, {1, 2}, {2, 1}}));
  EXPECT_EQ(format_alignment(a), "0-0 1-2 2-1");
  EXPECT_TRUE(parse_alignment("").empty());
  EXPECT_THROW(parse_alignment("0:1"), AlignmentError);
}

TEST(Alignment, LexiconPicksNearestTranslation) {
  const TranslationLexicon lex{{"it", {"er", "es"}}, {"dog", {"hund"}}};
  const auto a = align_by_lexicon(split_ws("the dog and it"), split_ws("es der hund und er"), lex);
  EXPECT_EQ(a, (Alignment{{1, 2}, {3, 4}}));
}

class AptHandCorpus : public testing::Test {
 protected:
  // it: identical; it: different (ihn vs es); it: missing (no candidate
  // alignment); they: identical up to case; it: identical.
  Corpus src = corpus({"it is red", "he sees it", "it was old", "they are here", "the dog saw it"});
  Corpus ref = corpus({"er ist rot", "er sieht ihn", "es war alt", "sie sind hier", "der hund sah es"});
  Corpus cand = corpus({"er ist rot", "er sieht es", "war alt", "Sie sind hier", "der hund sah es"});
  std::vector<Alignment> align_ref{identity(3), identity(3), identity(3), identity(3), identity(4)};
  std::vector<Alignment> align_cand{identity(3), identity(3), {{1, 0}, {2, 1}}, identity(3), identity(4)};
  std::vector<std::string> tracked{"it", "they"};
};

TEST_F(AptHandCorpus, CountsAndScore) {
  const auto r = apt(src, cand, ref, align_ref, align_cand, tracked);
  EXPECT_EQ(r.all.identical, 3u);
  EXPECT_EQ(r.all.different, 1u);
  EXPECT_EQ(r.all.missing, 1u);
  EXPECT_DOUBLE_EQ(*r.all.score(), 0.6);
  EXPECT_EQ(r.per_pronoun.at("it").total(), 4u);
  EXPECT_EQ(r.per_pronoun.at("they").identical, 1u);
  EXPECT_DOUBLE_EQ(*r.ambiguous.score(), 0.6);
  // With the default list "he" is tracked too and is identical.
  EXPECT_EQ(apt(src, cand, ref, align_ref, align_cand).all.identical, 4u);
}

TEST_F(AptHandCorpus, InvariantToPronounFreeSentences) {
  const auto base = apt(src, cand, ref, align_ref, align_cand, tracked);
  Corpus s2 = src, c2 = cand, r2 = ref;
  auto ar = align_ref, ac = align_cand;
  s2.insert(s2.begin() + 2, split_ws("the dog is red"));
  c2.insert(c2.begin() + 2, split_ws("der hund ist blau"));
  r2.insert(r2.begin() + 2, split_ws("der hund ist rot"));
  ar.insert(ar.begin() + 2, identity(4));
  ac.insert(ac.begin() + 2, Alignment{});
  const auto more = apt(s2, c2, r2, ar, ac, tracked);
  EXPECT_EQ(more.all.identical, base.all.identical);
  EXPECT_EQ(more.all.different, base.all.different);
  EXPECT_EQ(more.all.missing, base.all.missing);
}

TEST_F(AptHandCorpus, MissingAlignmentLineIsError) {
  auto short_align = align_cand;
  short_align.pop_back();
  EXPECT_THROW(apt(src, cand, ref, align_ref, short_align), AlignmentError);
}

TEST(Apt, IdentityIsOne) {
  const auto c = corpus({"it is red", "they see it"});
  const auto r = apt(c, c, c, {identity(3), identity(3)}, {identity(3), identity(3)});
  EXPECT_DOUBLE_EQ(*r.all.score(), 1.0);
  EXPECT_DOUBLE_EQ(*r.ambiguous.score(), 1.0);
}

TEST(Apt, NoTrackedPronounsIsUndefined) {
  const auto c = corpus({"the dog is red"});
  const auto r = apt(c, c, c, {identity(4)}, {identity(4)});
  EXPECT_EQ(r.all.total(), 0u);
  EXPECT_FALSE(r.all.score().has_value());
  const auto j = to_json(r);
  EXPECT_TRUE(j["all"]["undefined"].get<bool>());
  EXPECT_TRUE(j["all"]["score"].is_null());
}

TEST(Apt, MultiAlignedAnyMatchAndEquivalents) {
  const auto src = corpus({"it is red"});
  const auto ref = corpus({"es ist rot"});
  const auto cand = corpus({"das es ist rot"});
  const auto r = apt(src, cand, ref, {identity(3)}, {{{0, 0}, {0, 1}, {1, 2}, {2, 3}}});
  EXPECT_EQ(r.all.identical, 1u);
  EXPECT_TRUE(r.multi_aligned);

  const auto cand2 = corpus({"dies ist rot"});
  EXPECT_EQ(apt(src, cand2, ref, {identity(3)}, {identity(3)}).all.different, 1u);
  const EquivalenceLexicon eq{{"es", {"dies"}}};
  EXPECT_EQ(apt(src, cand2, ref, {identity(3)}, {identity(3)}, default_tracked_pronouns(), eq).all.identical, 1u);
}

TEST(Contrastive, TieCountsIncorrect) {
  const std::vector<ContrastiveSet> sets{{"s", "r", {"r"}, 0, "it"}};
  const auto rep = contrastive_eval(sets, table_scorer({}));
  EXPECT_EQ(rep.overall.n, 1u);
  EXPECT_EQ(rep.overall.correct, 0u);
}

TEST(Contrastive, StrictlyAboveEveryVariant) {
  const std::vector<ContrastiveSet> sets{{"s", "r", {"a", "b"}, 0, "it"}, {"s", "r", {"a", "c"}, 1, "it"}};
  const auto rep = contrastive_eval(sets, table_scorer({{"r", -1.0}, {"a", -2.0}, {"b", -3.0}, {"c", -0.5}}));
  EXPECT_EQ(rep.decisions, (std::vector<bool>{true, false}));
}

TEST(Contrastive, EmptyVariantListIsSkipped) {
  testing::internal::CaptureStderr();
  const auto rep = contrastive_eval({{"s", "r", {}, 0, "it"}}, table_scorer({}));
  EXPECT_FALSE(testing::internal::GetCapturedStderr().empty());
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_EQ(rep.overall.n, 0u);
  EXPECT_FALSE(rep.overall.accuracy().has_value());
}

TEST(Contrastive, BucketsAndShiftInvarianceAgainstBruteForce) {
  Rng rng(3);
  std::vector<ContrastiveSet> sets;
  std::map<std::string, double> table;
  for (int i = 0; i < 100; ++i) {
    ContrastiveSet s;
    s.src = "src" + std::to_string(i);
    s.ref = "ref" + std::to_string(i);
    s.distance = static_cast<int>(rng.below(5));
    table[s.ref] = std::round(rng.uniform(-5, 0) * 2) / 2;  // coarse grid makes ties likely
    for (std::size_t k = 0; k < 1 + rng.below(3); ++k) {
      const std::string v = s.ref + "_v" + std::to_string(k);
      table[v] = std::round(rng.uniform(-5, 0) * 2) / 2;
      s.contrastive.push_back(v);
    }
    sets.push_back(s);
  }
  const auto rep = contrastive_eval(sets, table_scorer(table));
  const auto shifted = contrastive_eval(sets, table_scorer(table, 123.0));
  EXPECT_EQ(rep.decisions, shifted.decisions);

  std::array<std::size_t, 3> n{}, correct{};
  for (std::size_t i = 0; i < sets.size(); ++i) {
    bool ok = true;
    for (const auto& v : sets[i].contrastive) ok = ok && table[sets[i].ref] > table[v];
    EXPECT_EQ(rep.decisions[i], ok) << i;
    const std::size_t b = sets[i].distance == 0 ? 0 : sets[i].distance == 1 ? 1 : 2;
    ++n[b];
    correct[b] += ok;
  }
  std::size_t sum_n = 0, sum_c = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    EXPECT_EQ(rep.buckets[b].n, n[b]);
    EXPECT_EQ(rep.buckets[b].correct, correct[b]);
    sum_n += rep.buckets[b].n;
    sum_c += rep.buckets[b].correct;
  }
  EXPECT_EQ(sum_n, rep.overall.n);
  EXPECT_EQ(sum_c, rep.overall.correct);
}

TEST(Contrastive, JsonlRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "mnmt_sets.jsonl").string();
  const std::vector<ContrastiveSet> sets{{"it is red .", "es ist rot .", {"er ist rot .", "sie ist rot ."}, 2, "it"}};
  write_contrastive_sets(path, sets);
  const auto back = read_contrastive_sets(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].contrastive, sets[0].contrastive);
  EXPECT_EQ(back[0].distance, 2);
}

TEST(Synthetic, ReferencesFollowTheRuleOracle) {
  SynthSizes sizes;
  sizes.train = 300;
  sizes.dev = sizes.test = 50;
  sizes.contrastive = 90;
  const auto task = make_synthetic_task(11, sizes);
  for (const auto& s : task.train) {
    EXPECT_EQ(synth_rule_translate(s.src), s.tgt) << join(s.src);
    EXPECT_EQ(s.src.size(), s.tgt.size());
    EXPECT_EQ(s.alignment, identity(s.src.size()));
    EXPECT_EQ(s.src_pos.size(), s.src.size());
  }
  // Generator self-check: the reference pronoun agrees with its antecedent,
  // so the rule translator reproduces every reference and no variant.
  std::size_t correct = 0;
  for (const auto& set : task.contrastive) {
    const std::string rule = join(synth_rule_translate(split_ws(set.src)));
    EXPECT_EQ(rule, set.ref);
    EXPECT_EQ(set.contrastive.size(), 2u);
    for (const auto& v : set.contrastive) EXPECT_NE(v, set.ref);
  }
  const auto rep = contrastive_eval(task.contrastive, [](const std::string& src, const std::vector<std::string>& t) {
    const std::string rule = join(synth_rule_translate(split_ws(src)));
    std::vector<double> out;
    for (const auto& x : t) out.push_back(x == rule ? 0.0 : -1.0);
    return out;
  });
  correct = rep.overall.correct;
  EXPECT_EQ(correct, task.contrastive.size());
  EXPECT_DOUBLE_EQ(*rep.overall.accuracy(), 1.0);
}

TEST(Synthetic, DistanceHistogramMatchesRequest) {
  for (const std::size_t total : {90u, 100u, 601u}) {
    SynthSizes sizes;
    sizes.train = sizes.dev = sizes.test = 1;
    sizes.contrastive = total;
    sizes.distance_mix = {0.5, 0.3, 0.2};
    const auto task = make_synthetic_task(5, sizes);
    std::array<double, 3> hist{};
    for (const auto& s : task.contrastive) ++hist[distance_bucket(s.distance)];
    for (std::size_t b = 0; b < 3; ++b)
      EXPECT_LE(std::abs(hist[b] - sizes.distance_mix[b] * static_cast<double>(total)), 1.0) << total << " " << b;
  }
}

TEST(Synthetic, SameSeedSameTask) {
  SynthSizes sizes;
  sizes.train = 50;
  sizes.contrastive = 20;
  const auto a = make_synthetic_task(3, sizes);
  const auto b = make_synthetic_task(3, sizes);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].src, b.train[i].src);
  for (std::size_t i = 0; i < a.contrastive.size(); ++i) EXPECT_EQ(a.contrastive[i].ref, b.contrastive[i].ref);
}
