#pragma once

// Closed whitespace-token vocabulary. Synthetic tasks control their entire
// token set, so an unknown token is a hard error rather than an UNK.

#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace metaprompt {

// Non-special words come in fixed index groups; group membership is the unit
// of shared structure between the embedding table (one cluster direction per
// group) and the synthetic task families (concepts, key/value sets, and
// substitution rules are built from whole groups).
inline constexpr int kWordGroupSize = 6;

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kSep = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecials = 4;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocab make(int size) {
    static const char* specials[] = {"<pad>", "<bos>", "<sep>", "<eos>"};
    Vocab v;
    v.tokens.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size && i < kNumSpecials; ++i) {
      v.tokens.emplace_back(specials[i]);
    }
    for (int i = kNumSpecials; i < size; ++i) {
      v.tokens.push_back("w" + std::to_string(i - kNumSpecials));
    }
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
      v.index.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    }
    return v;
  }

  static Vocab from_tokens(std::vector<std::string> toks) {
    Vocab v;
    v.tokens = std::move(toks);
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i) {
      v.index.emplace(v.tokens[static_cast<std::size_t>(i)], i);
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }

  int word_count() const { return size() - kNumSpecials; }

  // n-th non-special token.
  const std::string& word(int n) const {
    return tokens.at(static_cast<std::size_t>(n + kNumSpecials));
  }

  int id(const std::string& token) const {
    auto it = index.find(token);
    if (it == index.end()) {
      throw std::invalid_argument("unknown token '" + token + "'");
    }
    return it->second;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) ids.push_back(id(tok));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      if (t < 0 || t >= size()) {
        throw std::invalid_argument("token id out of range: " + std::to_string(t));
      }
      if (!out.empty()) out += ' ';
      out += tokens[static_cast<std::size_t>(t)];
    }
    return out;
  }
};

}  // namespace metaprompt
