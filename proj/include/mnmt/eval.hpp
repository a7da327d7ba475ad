#pragma once

// Corpus metrics: BLEU, accuracy of pronoun translation (APT) under word
// alignments, and contrastive scoring with antecedent-distance buckets.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mnmt/mention_tags.hpp"
#include "mnmt/text.hpp"

namespace mnmt {

using Corpus = std::vector<std::vector<std::string>>;

// ---------------------------------------------------------------------------
// BLEU

struct BleuResult {
  double score = 0;  // [0, 100]
  std::array<double, 4> precisions{};
  double brevity_penalty = 0;
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
};

// Corpus BLEU-4 with a single reference per line. With add_one, n-gram
// precisions for n >= 2 use (matches + 1) / (total + 1).
inline BleuResult bleu(const Corpus& candidates, const Corpus& references, bool add_one = false) {
  if (candidates.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (candidates.size() != references.size())
    throw std::invalid_argument("bleu: candidate and reference line counts differ");
  std::array<double, 4> match{}, total{};
  BleuResult r;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& c = candidates[s];
    const auto& ref = references[s];
    r.cand_len += c.size();
    r.ref_len += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i)
        ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
      std::map<std::vector<std::string>, std::size_t> cand_counts;
      for (std::size_t i = 0; i + n <= c.size(); ++i)
        ++cand_counts[std::vector<std::string>(c.begin() + i, c.begin() + i + n)];
      for (const auto& [gram, cnt] : cand_counts) {
        auto it = ref_counts.find(gram);
        match[n - 1] += static_cast<double>(std::min(cnt, it == ref_counts.end() ? 0 : it->second));
        total[n - 1] += static_cast<double>(cnt);
      }
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = match[n], t = total[n];
    if (add_one && n > 0) {
      m += 1;
      t += 1;
    }
    r.precisions[n] = t > 0 ? m / t : 0.0;
    if (r.precisions[n] <= 0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  r.brevity_penalty = r.cand_len == 0 ? 0.0
                      : r.cand_len < r.ref_len
                          ? std::exp(1.0 - static_cast<double>(r.ref_len) / static_cast<double>(r.cand_len))
                          : 1.0;
  r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

// ---------------------------------------------------------------------------
// Alignments: one line per sentence of 0-based "src-tgt" pairs.

using Alignment = std::vector<std::pair<std::size_t, std::size_t>>;

inline Alignment parse_alignment(const std::string& line) {
  Alignment a;
  for (const auto& tok : split_ws(line)) {
    const auto dash = tok.find('-');
    if (dash == std::string::npos || dash == 0 || dash + 1 == tok.size())
      throw AlignmentError("malformed alignment pair '" + tok + "'");
    try {
      a.emplace_back(std::stoul(tok.substr(0, dash)), std::stoul(tok.substr(dash + 1)));
    } catch (const std::logic_error&) {
      throw AlignmentError("malformed alignment pair '" + tok + "'");
    }
  }
  return a;
}

inline std::string format_alignment(const Alignment& a) {
  std::string out;
  for (const auto& [s, t] : a) {
    if (!out.empty()) out += ' ';
    out += std::to_string(s) + "-" + std::to_string(t);
  }
  return out;
}

inline std::vector<Alignment> read_alignments(const std::string& path) {
  std::vector<Alignment> out;
  for (const auto& line : read_lines(path)) out.push_back(parse_alignment(line));
  return out;
}

// Bilingual dictionary aligner: each source word links to the nearest
// target position holding one of its listed translations.
using TranslationLexicon = std::map<std::string, std::set<std::string>>;

inline TranslationLexicon read_lexicon(const std::string& path) {
  TranslationLexicon lex;
  for (const auto& line : read_lines(path)) {
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    for (std::size_t i = 1; i < toks.size(); ++i) lex[to_lower(toks[0])].insert(to_lower(toks[i]));
  }
  return lex;
}

inline Alignment align_by_lexicon(const std::vector<std::string>& src, const std::vector<std::string>& tgt,
                                  const TranslationLexicon& lex) {
  Alignment a;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto it = lex.find(to_lower(src[i]));
    if (it == lex.end()) continue;
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < tgt.size(); ++j) {
      if (!it->second.count(to_lower(tgt[j]))) continue;
      const auto dist = [&](std::size_t k) { return k > i ? k - i : i - k; };
      if (!best || dist(j) < dist(*best)) best = j;
    }
    if (best) a.emplace_back(i, *best);
  }
  return a;
}

// ---------------------------------------------------------------------------
// APT

struct AptCounts {
  std::size_t identical = 0;
  std::size_t different = 0;
  std::size_t missing = 0;

  std::size_t total() const { return identical + different + missing; }
  std::optional<double> score() const {
    if (total() == 0) return std::nullopt;
    return static_cast<double>(identical) / static_cast<double>(total());
  }
  AptCounts& operator+=(const AptCounts& o) {
    identical += o.identical;
    different += o.different;
    missing += o.missing;
    return *this;
  }
};

struct AptReport {
  std::map<std::string, AptCounts> per_pronoun;
  AptCounts all;
  AptCounts ambiguous;
  bool multi_aligned = false;  // some pronoun aligned to several words
};

inline const std::vector<std::string>& default_tracked_pronouns() {
  static const std::vector<std::string> p{"it", "they", "he", "she", "we", "i", "you"};
  return p;
}
inline const std::vector<std::string>& ambiguous_pronouns() {
  static const std::vector<std::string> p{"it", "they"};
  return p;
}

// Optional equivalence lexicon: a reference form maps to other target forms
// that count as identical.
using EquivalenceLexicon = std::map<std::string, std::set<std::string>>;

// Each tracked source pronoun is: identical if any candidate-aligned word
// matches any reference-aligned word (case-insensitive, or via the
// equivalence lexicon); missing if it has no candidate alignment; different
// otherwise. An occurrence without reference alignment is identical only
// when the candidate also leaves it unaligned.
inline AptReport apt(const Corpus& src, const Corpus& candidates, const Corpus& references,
                     const std::vector<Alignment>& align_ref, const std::vector<Alignment>& align_cand,
                     const std::vector<std::string>& tracked = default_tracked_pronouns(),
                     const EquivalenceLexicon& equivalents = {},
                     const std::vector<std::string>& ambiguous = ambiguous_pronouns()) {
  if (candidates.size() != src.size() || references.size() != src.size())
    throw std::invalid_argument("apt: source, candidate and reference line counts differ");
  if (align_ref.size() < src.size() || align_cand.size() < src.size())
    throw AlignmentError("apt: missing alignment lines (" + std::to_string(align_ref.size()) + "/" +
                         std::to_string(align_cand.size()) + " for " + std::to_string(src.size()) +
                         " sentences)");
  std::set<std::string> tracked_set, ambiguous_set;
  for (const auto& p : tracked) tracked_set.insert(to_lower(p));
  for (const auto& p : ambiguous) ambiguous_set.insert(to_lower(p));
  AptReport report;
  auto aligned = [](const Alignment& a, std::size_t i, const std::vector<std::string>& tgt,
                    const std::string& side) {
    std::vector<std::string> out;
    for (const auto& [s, t] : a) {
      if (s != i) continue;
      if (t >= tgt.size()) throw AlignmentError("apt: " + side + " alignment index out of range");
      out.push_back(to_lower(tgt[t]));
    }
    return out;
  };
  for (std::size_t s = 0; s < src.size(); ++s) {
    for (std::size_t i = 0; i < src[s].size(); ++i) {
      const std::string word = to_lower(src[s][i]);
      if (!tracked_set.count(word)) continue;
      const auto ref_words = aligned(align_ref[s], i, references[s], "reference");
      const auto cand_words = aligned(align_cand[s], i, candidates[s], "candidate");
      if (cand_words.size() > 1 || ref_words.size() > 1) report.multi_aligned = true;
      AptCounts c;
      if (ref_words.empty()) {
        (cand_words.empty() ? c.identical : c.different) = 1;
      } else if (cand_words.empty()) {
        c.missing = 1;
      } else {
        bool match = false;
        for (const auto& r : ref_words) {
          auto eq = equivalents.find(r);
          for (const auto& w : cand_words)
            match = match || w == r || (eq != equivalents.end() && eq->second.count(w));
        }
        (match ? c.identical : c.different) = 1;
      }
      report.per_pronoun[word] += c;
      report.all += c;
      if (ambiguous_set.count(word)) report.ambiguous += c;
    }
  }
  return report;
}

inline nlohmann::json to_json(const AptCounts& c) {
  nlohmann::json j = {{"identical", c.identical}, {"different", c.different}, {"missing", c.missing},
                      {"n", c.total()}};
  const auto s = c.score();
  j["score"] = s ? nlohmann::json(*s) : nlohmann::json(nullptr);
  j["undefined"] = !s.has_value();
  return j;
}

inline nlohmann::json to_json(const AptReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [p, c] : r.per_pronoun) per[p] = to_json(c);
  return {{"all", to_json(r.all)}, {"ambiguous", to_json(r.ambiguous)}, {"per_pronoun", per},
          {"multi_aligned", r.multi_aligned}};
}

// ---------------------------------------------------------------------------
// Contrastive evaluation

struct ContrastiveSet {
  std::string src;
  std::string ref;
  std::vector<std::string> contrastive;
  int distance = 0;
  std::string pronoun;
};

inline void to_json(nlohmann::json& j, const ContrastiveSet& s) {
  j = {{"src", s.src}, {"ref", s.ref}, {"contrastive", s.contrastive}, {"distance", s.distance},
       {"pronoun", s.pronoun}};
}
inline void from_json(const nlohmann::json& j, ContrastiveSet& s) {
  j.at("src").get_to(s.src);
  j.at("ref").get_to(s.ref);
  j.at("contrastive").get_to(s.contrastive);
  j.at("distance").get_to(s.distance);
  s.pronoun = j.value("pronoun", std::string());
  if (s.distance < 0) throw std::invalid_argument("contrastive set with negative distance");
}

inline std::vector<ContrastiveSet> read_contrastive_sets(const std::string& path) {
  std::vector<ContrastiveSet> out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ContrastiveSet>());
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_contrastive_sets(const std::string& path, const std::vector<ContrastiveSet>& sets) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& s : sets) out << nlohmann::json(s).dump() << '\n';
}

// Buckets: 0 = same sentence, 1 = previous sentence, 2 = further back.
inline std::size_t distance_bucket(int distance) { return distance <= 0 ? 0 : distance == 1 ? 1 : 2; }
inline const std::array<const char*, 3>& bucket_labels() {
  static const std::array<const char*, 3> l{"0", "1", ">1"};
  return l;
}

struct BucketStats {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy() const {
    if (n == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(n);
  }
};

struct ContrastiveReport {
  BucketStats overall;
  std::array<BucketStats, 3> buckets;
  std::vector<bool> decisions;  // per scored set, in input order
  std::size_t skipped = 0;
};

// Returns one score per target sentence for the given source.
using SequenceScorer =
    std::function<std::vector<double>(const std::string& src, const std::vector<std::string>& targets)>;

// A set is correct iff its reference scores strictly higher than every
// variant. Sets without variants are skipped.
inline ContrastiveReport contrastive_eval(const std::vector<ContrastiveSet>& sets, const SequenceScorer& scorer) {
  ContrastiveReport rep;
  for (const auto& s : sets) {
    if (s.contrastive.empty()) {
      warn("contrastive set without variants skipped: " + s.src);
      ++rep.skipped;
      continue;
    }
    std::vector<std::string> targets{s.ref};
    targets.insert(targets.end(), s.contrastive.begin(), s.contrastive.end());
    const auto scores = scorer(s.src, targets);
    if (scores.size() != targets.size()) throw std::logic_error("scorer returned wrong number of scores");
    bool correct = true;
    for (std::size_t i = 1; i < scores.size(); ++i) correct = correct && scores[0] > scores[i];
    rep.decisions.push_back(correct);
    auto& b = rep.buckets[distance_bucket(s.distance)];
    ++b.n;
    ++rep.overall.n;
    if (correct) {
      ++b.correct;
      ++rep.overall.correct;
    }
  }
  return rep;
}

inline nlohmann::json to_json(const ContrastiveReport& r) {
  auto acc = [](const BucketStats& b) {
    const auto a = b.accuracy();
    return a ? nlohmann::json(*a) : nlohmann::json(nullptr);
  };
  nlohmann::json buckets = nlohmann::json::object();
  for (std::size_t i = 0; i < 3; ++i)
    buckets[bucket_labels()[i]] = {{"n", r.buckets[i].n}, {"correct", r.buckets[i].correct},
                                   {"accuracy", acc(r.buckets[i])}};
  return {{"n", r.overall.n}, {"correct", r.overall.correct}, {"accuracy", acc(r.overall)},
          {"buckets", buckets}, {"skipped", r.skipped}};
}

}  // namespace mnmt
