#pragma once

// Byte-pair encoding with an end-of-word marker. Subwords that do not end a
// word carry the "@@" continuation suffix when written out.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mnmt/text.hpp"

namespace mnmt {

inline constexpr const char* kEndOfWord = "</w>";
inline constexpr const char* kContinuation = "@@";

using SymbolPair = std::pair<std::string, std::string>;

struct BpeModel {
  std::vector<SymbolPair> merges;  // learned order == application order
  std::size_t vocab_size_target = 0;
};

// Subword segmentation of a sentence. word_starts[w] is the index of word
// w's first subword; the last entry equals subwords.size().
struct Segmentation {
  std::vector<std::string> subwords;
  std::vector<std::size_t> word_starts;

  std::size_t num_words() const { return word_starts.empty() ? 0 : word_starts.size() - 1; }
};

namespace detail {

// Splits a token into UTF-8 characters, the last one carrying </w>.
inline std::vector<std::string> initial_symbols(const std::string& word) {
  std::vector<std::string> out = utf8_chars(word);
  if (!out.empty()) out.back() += kEndOfWord;
  return out;
}

inline void merge_in_place(std::vector<std::string>& symbols, const SymbolPair& pair) {
  std::vector<std::string> merged;
  merged.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      merged.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      merged.push_back(symbols[i]);
    }
  }
  symbols = std::move(merged);
}

}  // namespace detail

// Greedy learning: repeatedly merge the most frequent adjacent pair; ties go
// to the lexicographically smallest pair. Stops early when no pair reaches
// min_frequency.
inline BpeModel bpe_learn(const std::vector<std::string>& tokens, std::size_t num_merges,
                          std::size_t min_frequency = 2) {
  if (tokens.empty()) throw std::invalid_argument("bpe_learn: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens)
    if (!t.empty()) ++counts[t];
  if (counts.empty()) throw std::invalid_argument("bpe_learn: empty corpus");

  struct Entry {
    std::vector<std::string> symbols;
    std::size_t freq;
  };
  std::vector<Entry> words;
  words.reserve(counts.size());
  for (const auto& [w, c] : counts) words.push_back({detail::initial_symbols(w), c});

  BpeModel model;
  model.vocab_size_target = num_merges;
  for (std::size_t step = 0; step < num_merges; ++step) {
    std::map<SymbolPair, std::size_t> pair_counts;
    for (const auto& e : words)
      for (std::size_t i = 0; i + 1 < e.symbols.size(); ++i)
        pair_counts[{e.symbols[i], e.symbols[i + 1]}] += e.freq;
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    const SymbolPair* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, c] : pair_counts) {
      if (c > best_count) {
        best = &pair;
        best_count = c;
      }
    }
    if (!best || best_count < min_frequency) break;
    const SymbolPair chosen = *best;
    model.merges.push_back(chosen);
    for (auto& e : words) detail::merge_in_place(e.symbols, chosen);
  }
  return model;
}

class BpeApplier {
 public:
  explicit BpeApplier(const BpeModel& model) {
    for (std::size_t i = 0; i < model.merges.size(); ++i) ranks_.emplace(key(model.merges[i]), i);
  }

  // Subwords of one token, with @@ on all but the last.
  std::vector<std::string> segment_word(const std::string& word) const {
    if (auto it = cache_.find(word); it != cache_.end()) return it->second;
    std::vector<std::string> symbols = detail::initial_symbols(word);
    while (symbols.size() > 1) {
      std::size_t best_rank = SIZE_MAX, best_pos = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = ranks_.find(symbols[i] + '\x01' + symbols[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_pos = i;
        }
      }
      if (best_rank == SIZE_MAX) break;
      detail::merge_in_place(symbols, {symbols[best_pos], symbols[best_pos + 1]});
    }
    const std::string eow = kEndOfWord;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size()) {
        symbols[i] += kContinuation;
      } else if (symbols[i].size() >= eow.size() &&
                 symbols[i].compare(symbols[i].size() - eow.size(), eow.size(), eow) == 0) {
        symbols[i].erase(symbols[i].size() - eow.size());
      }
    }
    cache_.emplace(word, symbols);
    return symbols;
  }

  Segmentation apply(const std::vector<std::string>& tokens) const {
    Segmentation seg;
    seg.word_starts.reserve(tokens.size() + 1);
    for (const auto& t : tokens) {
      seg.word_starts.push_back(seg.subwords.size());
      auto pieces = segment_word(t);
      seg.subwords.insert(seg.subwords.end(), pieces.begin(), pieces.end());
    }
    seg.word_starts.push_back(seg.subwords.size());
    return seg;
  }

 private:
  static std::string key(const SymbolPair& p) { return p.first + '\x01' + p.second; }

  std::unordered_map<std::string, std::size_t> ranks_;
  mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
};

inline Segmentation bpe_apply(const std::vector<std::string>& tokens, const BpeModel& model) {
  return BpeApplier(model).apply(tokens);
}

// Inverse of bpe_apply: joins continuation pieces back into tokens.
inline std::vector<std::string> bpe_reconstruct(const std::vector<std::string>& subwords) {
  std::vector<std::string> words;
  std::string current;
  const std::string cont = kContinuation;
  for (const auto& s : subwords) {
    if (s.size() >= cont.size() && s.compare(s.size() - cont.size(), cont.size(), cont) == 0) {
      current += s.substr(0, s.size() - cont.size());
    } else {
      words.push_back(current + s);
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(current);
  return words;
}

// Word boundaries recovered from "@@"-marked subword text.
inline std::vector<std::size_t> boundaries_from_subwords(const std::vector<std::string>& subwords) {
  std::vector<std::size_t> starts;
  const std::string cont = kContinuation;
  bool at_start = true;
  for (std::size_t i = 0; i < subwords.size(); ++i) {
    if (at_start) starts.push_back(i);
    const auto& s = subwords[i];
    at_start = !(s.size() >= cont.size() &&
                 s.compare(s.size() - cont.size(), cont.size(), cont) == 0);
  }
  starts.push_back(subwords.size());
  return starts;
}

inline void save_bpe(const BpeModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write BPE model: " + path);
  for (const auto& [a, b] : model.merges) out << a << ' ' << b << '\n';
}

inline BpeModel load_bpe(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read BPE model: " + path);
  BpeModel model;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    SymbolPair p;
    std::string extra;
    if (!(ss >> p.first >> p.second) || (ss >> extra))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed merge line");
    model.merges.push_back(std::move(p));
  }
  model.vocab_size_target = model.merges.size();
  return model;
}

}  // namespace mnmt
