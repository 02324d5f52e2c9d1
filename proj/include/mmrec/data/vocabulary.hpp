#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrec/data/news.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

// Token <-> id map. Ids 0 and 1 are reserved for padding and unknown tokens;
// regular tokens occupy the contiguous range [2, size()).
class Vocabulary {
 public:
  static constexpr long long kPad = 0;
  static constexpr long long kUnk = 1;

  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw ValidationError("vocabulary token at line " + std::to_string(i + 1) + " is empty");
      if (!ids_.emplace(tokens_[i], static_cast<long long>(i) + 2).second) {
        throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  // Number of ids including the two reserved ones.
  std::size_t size() const { return tokens_.size() + 2; }

  long long id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token(long long id) const {
    static const std::string pad = "[PAD]", unk = "[UNK]";
    if (id == kPad) return pad;
    if (id == kUnk) return unk;
    if (id < 2 || static_cast<std::size_t>(id) >= size()) throw VocabularyError(id, size());
    return tokens_[static_cast<std::size_t>(id - 2)];
  }

  std::vector<long long> encode(const std::vector<std::string>& tokens) const {
    std::vector<long long> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  // FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](unsigned char c) {
      h ^= c;
      h *= 1099511628211ull;
    };
    for (const auto& t : tokens_) {
      for (unsigned char c : t) mix(c);
      mix('\n');
    }
    return h;
  }

  // vocab.txt: one token per line; line n (0-based) holds id n + 2.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, long long> ids_;
};

// Keeps tokens seen at least `min_count` times, ordered by count (descending)
// then token text; everything else maps to UNK.
inline Vocabulary build_vocab(const NewsTable& news, int min_count) {
  if (min_count < 1) throw ValidationError("min_count must be at least 1");
  std::map<std::string, long long> counts;
  for (const NewsRecord& r : news) {
    for (const auto& t : r.tokens) ++counts[t];
  }
  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [token, count] : counts) {
    if (count >= min_count) kept.emplace_back(token, count);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [token, count] : kept) tokens.push_back(token);
  return Vocabulary(std::move(tokens));
}

inline void assign_token_ids(NewsTable& news, const Vocabulary& vocab) {
  for (NewsRecord& r : news) r.title_ids = vocab.encode(r.tokens);
}

}  // namespace mmrec
