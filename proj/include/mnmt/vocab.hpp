#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mnmt/text.hpp"

namespace mnmt {

// Reserved ids are fixed: 0 <pad>, 1 <s>, 2 </s>, 3 <unk>.
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;

class Vocab {
 public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      index_[tokens_[i]] = static_cast<std::int32_t>(i);
  }

  // Entries sorted by descending frequency, then lexicographically, so the
  // id assignment is independent of input order.
  static Vocab build(const std::vector<std::vector<std::string>>& sentences) {
    std::map<std::string, std::size_t> freq;
    for (const auto& s : sentences)
      for (const auto& t : s) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, c] : items) v.add(tok);
    return v;
  }

  std::int32_t add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("vocab id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<std::int32_t> encode(const std::vector<std::string>& toks) const {
    std::vector<std::int32_t> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  std::vector<std::string> decode(const std::vector<std::int32_t>& ids) const {
    std::vector<std::string> out;
    for (const auto i : ids) {
      if (i == kPad || i == kBos || i == kEos) continue;
      out.push_back(token(i));
    }
    return out;
  }

  void save(const std::string& path) const { write_lines(path, tokens_); }

  static Vocab load(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.size() < 4 || lines[0] != "<pad>" || lines[1] != "<s>" || lines[2] != "</s>" ||
        lines[3] != "<unk>")
      throw std::runtime_error(path + ": vocabulary must start with the reserved tokens");
    Vocab v;
    for (std::size_t i = 4; i < lines.size(); ++i) {
      if (v.contains(lines[i])) throw std::runtime_error(path + ": duplicate entry " + lines[i]);
      v.add(lines[i]);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

}  // namespace mnmt
