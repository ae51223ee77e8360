// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "spt/errors.hpp"
#include "spt/hash.hpp"

namespace spt {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

enum class Special {
  Bos,
  Eot,
  Sys,
  Usr,
  Asst,
  SpToken,
  FlagMark,
  Pass,
  Fail,
  Pad,
};

inline const char* special_text(Special s) {
  switch (s) {
    case Special::Bos: return "<bos>";
    case Special::Eot: return "<eot>";
    case Special::Sys: return "<sys>";
    case Special::Usr: return "<usr>";
    case Special::Asst: return "<asst>";
    case Special::SpToken: return "<split-personality>";
    case Special::FlagMark: return "FLAG:";
    case Special::Pass: return "PASS";
    case Special::Fail: return "FAIL";
    case Special::Pad: return "<pad>";
  }
  return "?";
}

// Closed whitespace-delimited vocabulary over the synthetic grammar. Token ids
// are dense 0..V-1; specials occupy the first ten slots.
class Vocab {
 public:
  Vocab() = default;

  // `words` must not collide with special strings or each other.
  // `pad_to`: append unused filler tokens so the table reaches a fixed V.
  explicit Vocab(const std::vector<std::string>& words, int pad_to = 0) {
    for (int s = 0; s <= static_cast<int>(Special::Pad); ++s) {
      add(special_text(static_cast<Special>(s)));
    }
    for (const auto& w : words) add(w);
    int filler = 0;
    while (pad_to > 0 && static_cast<int>(tokens_.size()) < pad_to) {
      add("<unused" + std::to_string(filler++) + ">");
    }
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  TokenId special(Special s) const { return static_cast<TokenId>(s); }

  TokenId id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) fail(Errc::TokenOutOfRange, "unknown word: " + w);
    return it->second;
  }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  const std::string& text(TokenId t) const {
    if (t < 0 || t >= size()) fail(Errc::TokenOutOfRange, "token id " + std::to_string(t));
    return tokens_[static_cast<std::size_t>(t)];
  }

  TokenSeq encode(const std::string& sentence) const {
    TokenSeq out;
    std::string w;
    for (char c : sentence) {
      if (c == ' ' || c == '\t' || c == '\n') {
        if (!w.empty()) out.push_back(id(w));
        w.clear();
      } else {
        w.push_back(c);
      }
    }
    if (!w.empty()) out.push_back(id(w));
    return out;
  }

  std::string decode(const TokenSeq& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out.push_back(' ');
      out += text(seq[i]);
    }
    return out;
  }

  std::string hash() const {
    Hasher h;
    for (const auto& t : tokens_) {
      h.update(t);
      h.update("\x1f", 1);
    }
    return h.hex();
  }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) fail(Errc::ConfigInvalid, "duplicate vocab word: " + w);
    index_.emplace(w, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace spt
