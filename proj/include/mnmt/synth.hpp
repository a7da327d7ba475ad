#pragma once

// Toy English -> German-like corpus for pronoun translation. Every
// inanimate noun carries a grammatical gender; "it" must be rendered as
// the form matching the most recent inanimate noun (er/sie/es as subject,
// ihn/sie/es as object). Person nouns, names and filler sentences act as
// distractors. Translation is word-for-word, so alignments are exact.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mnmt/eval.hpp"
#include "mnmt/mention_tags.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/text.hpp"

namespace mnmt {

namespace synth {

enum class Gender { m = 0, f = 1, n = 2 };
enum class Case { nom, acc, dat };

struct Noun {
  const char* en;
  const char* de;
  Gender gender;
};
struct Word {
  const char* en;
  const char* de;
};

inline const std::vector<Noun>& objects() {
  static const std::vector<Noun> v{
      {"table", "tisch", Gender::m},     {"chair", "stuhl", Gender::m},  {"car", "wagen", Gender::m},
      {"spoon", "loeffel", Gender::m},   {"garden", "garten", Gender::m}, {"key", "schluessel", Gender::m},
      {"tree", "baum", Gender::m},       {"hat", "hut", Gender::m},      {"lamp", "lampe", Gender::f},
      {"door", "tuer", Gender::f},       {"bottle", "flasche", Gender::f}, {"box", "kiste", Gender::f},
      {"cup", "tasse", Gender::f},       {"clock", "uhr", Gender::f},    {"street", "strasse", Gender::f},
      {"bag", "tasche", Gender::f},      {"window", "fenster", Gender::n}, {"book", "buch", Gender::n},
      {"house", "haus", Gender::n},      {"bed", "bett", Gender::n},     {"glass", "glas", Gender::n},
      {"picture", "bild", Gender::n},    {"boat", "boot", Gender::n},    {"knife", "messer", Gender::n},
  };
  return v;
}

// Person nouns only use m/f.
inline const std::vector<Noun>& persons() {
  static const std::vector<Noun> v{
      {"man", "mann", Gender::m},     {"woman", "frau", Gender::f},  {"boy", "junge", Gender::m},
      {"sister", "schwester", Gender::f}, {"teacher", "lehrer", Gender::m}, {"nurse", "pflegerin", Gender::f},
  };
  return v;
}

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> v{"anna", "tom", "maria", "peter", "lena", "paul"};
  return v;
}

inline const std::vector<Word>& verbs() {
  static const std::vector<Word> v{
      {"sees", "sieht"},  {"buys", "kauft"},  {"likes", "mag"},    {"finds", "findet"},
      {"cleans", "putzt"}, {"moves", "bewegt"}, {"paints", "malt"}, {"sells", "verkauft"},
  };
  return v;
}

inline const std::vector<Word>& object_adjectives() {
  static const std::vector<Word> v{
      {"red", "rot"},   {"big", "gross"},   {"old", "alt"},     {"new", "neu"},
      {"small", "klein"}, {"broken", "kaputt"}, {"green", "gruen"}, {"cheap", "billig"},
  };
  return v;
}

inline const std::vector<Word>& mood_adjectives() {
  static const std::vector<Word> v{
      {"tired", "muede"}, {"happy", "froh"}, {"hungry", "hungrig"}, {"late", "spaet"}, {"busy", "beschaeftigt"},
  };
  return v;
}

inline const char* determiner(Gender g, Case c) {
  static const char* table[3][3] = {{"der", "den", "dem"}, {"die", "die", "der"}, {"das", "das", "dem"}};
  return table[static_cast<int>(g)][static_cast<int>(c)];
}

inline const char* it_form(Gender g, Case c) {
  static const char* nom[3] = {"er", "sie", "es"};
  static const char* acc[3] = {"ihn", "sie", "es"};
  return c == Case::nom ? nom[static_cast<int>(g)] : acc[static_cast<int>(g)];
}

}  // namespace synth

// Deterministic lexicon tagger covering both sides of the synthetic corpus.
inline std::string synth_pos(const std::string& word) {
  using namespace synth;
  static const std::map<std::string, std::string> lex = [] {
    std::map<std::string, std::string> m;
    for (const auto& n : objects()) m[n.en] = m[n.de] = "NOUN";
    for (const auto& n : persons()) m[n.en] = m[n.de] = "NOUN";
    for (const auto& n : names()) m[n] = "PROPN";
    for (const auto& v : verbs()) m[v.en] = m[v.de] = "VERB";
    for (const auto& a : object_adjectives()) m[a.en] = m[a.de] = "ADJ";
    for (const auto& a : mood_adjectives()) m[a.en] = m[a.de] = "ADJ";
    for (const char* d : {"the", "der", "die", "das", "den", "dem"}) m[d] = "DET";
    for (const char* p : {"it", "he", "she", "we", "they", "er", "sie", "es", "ihn", "wir"}) m[p] = "PRON";
    for (const char* a : {"is", "was", "are", "ist", "war", "sind"}) m[a] = "AUX";
    for (const char* a : {"near", "with", "neben", "mit"}) m[a] = "ADP";
    m["and"] = m["und"] = "CCONJ";
    m["."] = "PUNCT";
    return m;
  }();
  auto it = lex.find(word);
  return it == lex.end() ? "X" : it->second;
}

struct SynthSentence {
  std::vector<std::string> src, tgt;
  std::vector<std::string> src_pos, tgt_pos;
  Alignment alignment;  // src <-> tgt, identity for this corpus
};

struct SynthSizes {
  std::size_t train = 20000;
  std::size_t dev = 500;
  std::size_t test = 500;
  std::size_t contrastive = 600;
  // Share of contrastive sets at distance 0, 1 and >1.
  std::array<double, 3> distance_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double pronoun_rate = 0.85;  // segments containing "it" in train/dev/test
};

struct SynthTask {
  std::vector<SynthSentence> train, dev, test;
  std::vector<ContrastiveSet> contrastive;
  TranslationLexicon lexicon;  // source word -> possible target forms
};

namespace synth {

struct Builder {
  std::vector<std::string> src, tgt;
  void add(const std::string& e, const std::string& d) {
    src.push_back(e);
    tgt.push_back(d);
  }
};

struct PronounSite {
  std::size_t position;  // token index of "it"
  Gender gender;
  Case grammatical_case;
};

template <class V>
const auto& pick(Rng& rng, const V& v) {
  return v[rng.below(v.size())];
}

inline void person_phrase(Rng& rng, Builder& b, Case c) {
  if (rng.uniform() < 0.4) {
    const auto& n = pick(rng, names());
    b.add(n, n);
    return;
  }
  const auto& p = pick(rng, persons());
  b.add("the", determiner(p.gender, c));
  b.add(p.en, p.de);
}

inline Gender object_phrase(Rng& rng, Builder& b, Case c) {
  const auto& n = pick(rng, objects());
  b.add("the", determiner(n.gender, c));
  if (rng.uniform() < 0.4) {
    const auto& a = pick(rng, object_adjectives());
    b.add(a.en, a.de);
  }
  b.add(n.en, n.de);
  return n.gender;
}

// SUBJ VERB the [ADJ] N1 [near the [ADJ] N2] [with PERSON]; returns the
// gender of the last inanimate noun.
inline Gender antecedent_clause(Rng& rng, Builder& b) {
  person_phrase(rng, b, Case::nom);
  const auto& v = pick(rng, verbs());
  b.add(v.en, v.de);
  Gender g = object_phrase(rng, b, Case::acc);
  if (rng.uniform() < 0.5) {
    b.add("near", "neben");
    g = object_phrase(rng, b, Case::dat);
  }
  if (rng.uniform() < 0.3) {
    b.add("with", "mit");
    person_phrase(rng, b, Case::dat);
  }
  return g;
}

inline void filler_clause(Rng& rng, Builder& b) {
  const auto& mood = pick(rng, mood_adjectives());
  switch (rng.below(4)) {
    case 0:
      person_phrase(rng, b, Case::nom);
      b.add("is", "ist");
      break;
    case 1:
      if (rng.uniform() < 0.5) b.add("he", "er");
      else b.add("she", "sie");
      b.add("is", "ist");
      break;
    case 2:
      b.add("we", "wir");
      b.add("are", "sind");
      break;
    default:
      b.add("they", "sie");
      b.add("are", "sind");
  }
  b.add(mood.en, mood.de);
}

// "it is ADJ" / "it was ADJ" or "SUBJ VERB it".
inline PronounSite pronoun_clause(Rng& rng, Builder& b, Gender g) {
  if (rng.uniform() < 0.6) {
    const std::size_t pos = b.src.size();
    b.add("it", it_form(g, Case::nom));
    if (rng.uniform() < 0.5) b.add("is", "ist");
    else b.add("was", "war");
    const auto& a = pick(rng, object_adjectives());
    b.add(a.en, a.de);
    return {pos, g, Case::nom};
  }
  person_phrase(rng, b, Case::nom);
  const auto& v = pick(rng, verbs());
  b.add(v.en, v.de);
  const std::size_t pos = b.src.size();
  b.add("it", it_form(g, Case::acc));
  return {pos, g, Case::acc};
}

// One corpus line. distance < 0 produces a segment without "it".
inline std::pair<SynthSentence, std::optional<PronounSite>> segment(Rng& rng, int distance) {
  Builder b;
  std::optional<PronounSite> site;
  const Gender g = antecedent_clause(rng, b);
  if (distance == 0) {
    b.add("and", "und");
    site = pronoun_clause(rng, b, g);
  } else {
    b.add(".", ".");
    const int fillers = distance < 0 ? static_cast<int>(rng.below(2)) : distance - 1;
    for (int i = 0; i < fillers; ++i) {
      filler_clause(rng, b);
      b.add(".", ".");
    }
    if (distance > 0) site = pronoun_clause(rng, b, g);
    else filler_clause(rng, b);
  }
  b.add(".", ".");
  SynthSentence s;
  s.src = std::move(b.src);
  s.tgt = std::move(b.tgt);
  for (const auto& w : s.src) s.src_pos.push_back(synth_pos(w));
  for (const auto& w : s.tgt) s.tgt_pos.push_back(synth_pos(w));
  for (std::size_t i = 0; i < s.src.size(); ++i) s.alignment.emplace_back(i, i);
  return {std::move(s), site};
}

inline SynthSentence corpus_segment(Rng& rng, double pronoun_rate) {
  const int distance = rng.uniform() < pronoun_rate ? static_cast<int>(rng.below(4)) : -1;
  return segment(rng, distance).first;
}

}  // namespace synth

inline TranslationLexicon synth_lexicon() {
  using namespace synth;
  TranslationLexicon lex;
  for (const auto& n : objects()) lex[n.en].insert(n.de);
  for (const auto& n : persons()) lex[n.en].insert(n.de);
  for (const auto& n : names()) lex[n].insert(n);
  for (const auto& v : verbs()) lex[v.en].insert(v.de);
  for (const auto& a : object_adjectives()) lex[a.en].insert(a.de);
  for (const auto& a : mood_adjectives()) lex[a.en].insert(a.de);
  lex["the"] = {"der", "die", "das", "den", "dem"};
  lex["it"] = {"er", "sie", "es", "ihn"};
  lex["he"] = {"er"};
  lex["she"] = {"sie"};
  lex["they"] = {"sie"};
  lex["we"] = {"wir"};
  lex["is"] = {"ist"};
  lex["was"] = {"war"};
  lex["are"] = {"sind"};
  lex["near"] = {"neben"};
  lex["with"] = {"mit"};
  lex["and"] = {"und"};
  lex["."] = {"."};
  return lex;
}

inline SynthTask make_synthetic_task(std::uint64_t seed, const SynthSizes& sizes = {}) {
  SynthTask task;
  Rng train_rng(mix64(seed) ^ 1), dev_rng(mix64(seed) ^ 2), test_rng(mix64(seed) ^ 3), con_rng(mix64(seed) ^ 4);
  for (std::size_t i = 0; i < sizes.train; ++i) task.train.push_back(synth::corpus_segment(train_rng, sizes.pronoun_rate));
  for (std::size_t i = 0; i < sizes.dev; ++i) task.dev.push_back(synth::corpus_segment(dev_rng, sizes.pronoun_rate));
  for (std::size_t i = 0; i < sizes.test; ++i) task.test.push_back(synth::corpus_segment(test_rng, sizes.pronoun_rate));

  // Bucket counts by rounding the cumulative shares, so each bucket is within
  // one item of its requested proportion.
  double total_mix = 0;
  for (double p : sizes.distance_mix) total_mix += p;
  std::array<std::size_t, 3> counts{};
  double cum = 0;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    cum += sizes.distance_mix[k] / total_mix;
    const auto upto = static_cast<std::size_t>(std::llround(cum * static_cast<double>(sizes.contrastive)));
    counts[k] = upto - assigned;
    assigned = upto;
  }
  std::vector<int> distances;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < counts[k]; ++i)
      distances.push_back(k < 2 ? static_cast<int>(k) : 2 + static_cast<int>(i % 2));
  for (std::size_t i = distances.size(); i > 1; --i) std::swap(distances[i - 1], distances[con_rng.below(i)]);
  for (int d : distances) {
    auto [s, site] = synth::segment(con_rng, d);
    ContrastiveSet set;
    set.src = join(s.src);
    set.ref = join(s.tgt);
    set.distance = d;
    set.pronoun = "it";
    const std::string right = s.tgt[site->position];
    std::set<std::string> seen{right};
    for (int g = 0; g < 3; ++g) {
      const std::string form = synth::it_form(static_cast<synth::Gender>(g), site->grammatical_case);
      if (!seen.insert(form).second) continue;
      auto variant = s.tgt;
      variant[site->position] = form;
      set.contrastive.push_back(join(variant));
    }
    task.contrastive.push_back(std::move(set));
  }
  task.lexicon = synth_lexicon();
  return task;
}

// Rule-based reference translator for the synthetic language: it re-derives
// determiners and pronoun forms from the source alone.
inline std::vector<std::string> synth_rule_translate(const std::vector<std::string>& src) {
  using namespace synth;
  std::map<std::string, const Noun*> nouns;
  for (const auto& n : objects()) nouns[n.en] = &n;
  for (const auto& n : persons()) nouns[n.en] = &n;
  std::map<std::string, std::string> words;
  for (const auto& [en, des] : synth_lexicon())
    if (des.size() == 1) words[en] = *des.begin();
  std::optional<Gender> last_object;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::string& w = src[i];
    const bool clause_start = i == 0 || src[i - 1] == "." || src[i - 1] == "and";
    if (w == "the") {
      std::size_t j = i + 1;
      while (j < src.size() && !nouns.count(src[j])) ++j;
      const Gender g = j < src.size() ? nouns[src[j]]->gender : Gender::m;
      const bool after_prep = i > 0 && (src[i - 1] == "near" || src[i - 1] == "with");
      const Case c = after_prep ? Case::dat : clause_start ? Case::nom : Case::acc;
      out.push_back(determiner(g, c));
    } else if (w == "it") {
      out.push_back(it_form(last_object.value_or(Gender::n), clause_start ? Case::nom : Case::acc));
    } else {
      if (auto n = nouns.find(w); n != nouns.end()) {
        bool object = false;
        for (const auto& o : objects()) object = object || o.en == w;
        if (object) last_object = n->second->gender;
        out.push_back(n->second->de);
        continue;
      }
      auto it = words.find(w);
      out.push_back(it == words.end() ? w : it->second);
    }
  }
  return out;
}

inline void write_synth_split(const std::filesystem::path& dir, const std::string& split,
                              const std::vector<SynthSentence>& sents) {
  std::vector<std::string> src, tgt, align;
  std::vector<TaggedTokens> src_tags, tgt_tags;
  for (const auto& s : sents) {
    src.push_back(join(s.src));
    tgt.push_back(join(s.tgt));
    align.push_back(format_alignment(s.alignment));
    src_tags.push_back({s.src, s.src_pos});
    tgt_tags.push_back({s.tgt, s.tgt_pos});
  }
  write_lines((dir / (split + ".src")).string(), src);
  write_lines((dir / (split + ".tgt")).string(), tgt);
  write_lines((dir / (split + ".align")).string(), align);
  write_tag_file((dir / (split + ".src.tags")).string(), src_tags);
  write_tag_file((dir / (split + ".tgt.tags")).string(), tgt_tags);
}

// Layout: {train,dev,test}.{src,tgt,align,src.tags,tgt.tags},
// contrastive.jsonl and lexicon.tsv (source word, then its target forms).
inline void write_synthetic_task(const SynthTask& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_synth_split(dir, "train", task.train);
  write_synth_split(dir, "dev", task.dev);
  write_synth_split(dir, "test", task.test);
  write_contrastive_sets((dir / "contrastive.jsonl").string(), task.contrastive);
  std::vector<std::string> lex;
  for (const auto& [en, des] : task.lexicon) {
    std::string line = en;
    for (const auto& d : des) line += "\t" + d;
    lex.push_back(line);
  }
  write_lines((dir / "lexicon.tsv").string(), lex);
}

}  // namespace mnmt
