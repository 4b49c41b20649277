#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "clozepet/error.hpp"

namespace clozepet {

using TokenIds = std::vector<int>;

// True for ASCII letters and for any multi-byte UTF-8 sequence, so that
// umlauts count as letters. Digits and ASCII punctuation do not.
inline bool is_word_byte(unsigned char ch) {
  if (ch >= 0x80) return true;
  return (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
         (ch >= '0' && ch <= '9');
}

inline bool is_alphabetic_token(const std::string& tok) {
  if (tok.empty()) return false;
  for (unsigned char ch : tok) {
    if (ch >= 0x80) continue;
    if (!((ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z'))) return false;
  }
  return true;
}

// Unicode-aware-enough length: counts UTF-8 code points.
inline std::size_t codepoint_count(const std::string& tok) {
  std::size_t n = 0;
  for (unsigned char ch : tok) {
    if ((ch & 0xC0) != 0x80) ++n;
  }
  return n;
}

struct Vocabulary {
  static constexpr const char* kPad = "[PAD]";
  static constexpr const char* kUnk = "[UNK]";
  static constexpr const char* kMask = "[MASK]";
  static constexpr const char* kSep = "[SEP]";
  static constexpr const char* kCls = "[CLS]";

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> token_to_id;
  int pad_id = -1, unk_id = -1, mask_id = -1, sep_id = -1, cls_id = -1;

  static Vocabulary from_tokens(std::vector<std::string> toks) {
    Vocabulary v;
    v.tokens = std::move(toks);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
      if (!v.token_to_id.emplace(v.tokens[i], static_cast<int>(i)).second) {
        throw Error(ErrorCode::InvalidConfig,
                    "duplicate vocabulary token '" + v.tokens[i] + "'");
      }
    }
    v.pad_id = v.lookup(kPad);
    v.unk_id = v.lookup(kUnk);
    v.mask_id = v.lookup(kMask);
    v.sep_id = v.lookup(kSep);
    v.cls_id = v.lookup(kCls);
    if (v.pad_id < 0 || v.unk_id < 0 || v.mask_id < 0 || v.sep_id < 0 ||
        v.cls_id < 0) {
      throw Error(ErrorCode::InvalidConfig, "vocabulary is missing a special token");
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }

  int lookup(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? -1 : it->second;
  }

  const std::string& surface(int id) const { return tokens.at(static_cast<std::size_t>(id)); }

  bool is_special(int id) const {
    return id == pad_id || id == unk_id || id == mask_id || id == sep_id ||
           id == cls_id;
  }
};

// Splits a raw text into word/punctuation pieces. Special-token surface
// forms ([SEP], [MASK], ...) pass through as single pieces even when glued
// to neighboring characters.
inline std::vector<std::string> pre_split(const std::string& text) {
  static const std::vector<std::string> specials = {
      Vocabulary::kPad, Vocabulary::kUnk, Vocabulary::kMask,
      Vocabulary::kSep, Vocabulary::kCls};
  std::vector<std::string> pieces;
  auto emit_plain = [&](const std::string& chunk) {
    std::string word;
    for (unsigned char ch : chunk) {
      if (is_word_byte(ch)) {
        word += static_cast<char>(ch);
      } else {
        if (!word.empty()) {
          pieces.push_back(word);
          word.clear();
        }
        pieces.push_back(std::string(1, static_cast<char>(ch)));
      }
    }
    if (!word.empty()) pieces.push_back(word);
  };
  auto emit_chunk = [&](const std::string& chunk) {
    std::size_t pos = 0;
    while (pos < chunk.size()) {
      std::size_t best_at = std::string::npos;
      std::size_t best_len = 0;
      for (const auto& sp : specials) {
        std::size_t at = chunk.find(sp, pos);
        if (at != std::string::npos &&
            (at < best_at || (at == best_at && sp.size() > best_len))) {
          best_at = at;
          best_len = sp.size();
        }
      }
      if (best_at == std::string::npos) {
        emit_plain(chunk.substr(pos));
        return;
      }
      if (best_at > pos) emit_plain(chunk.substr(pos, best_at - pos));
      pieces.push_back(chunk.substr(best_at, best_len));
      pos = best_at + best_len;
    }
  };
  std::string chunk;
  for (unsigned char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      if (!chunk.empty()) {
        emit_chunk(chunk);
        chunk.clear();
      }
    } else {
      chunk += static_cast<char>(ch);
    }
  }
  if (!chunk.empty()) emit_chunk(chunk);
  return pieces;
}

// Whitespace-plus-punctuation pre-split, exact lookup, then greedy
// longest-match subword cover; a piece with no full cover becomes one UNK.
inline TokenIds tokenize(const std::string& text, const Vocabulary& vocab) {
  TokenIds ids;
  std::size_t max_len = 1;
  for (const auto& tok : vocab.tokens) max_len = std::max(max_len, tok.size());
  for (const auto& piece : pre_split(text)) {
    int exact = vocab.lookup(piece);
    if (exact >= 0) {
      ids.push_back(exact);
      continue;
    }
    // Greedy cover. Special tokens never match as subwords.
    TokenIds cover;
    std::size_t pos = 0;
    bool ok = true;
    while (pos < piece.size()) {
      int match = -1;
      std::size_t take = std::min(piece.size() - pos, max_len);
      for (std::size_t len = take; len >= 1; --len) {
        int cand = vocab.lookup(piece.substr(pos, len));
        if (cand >= 0 && !vocab.is_special(cand)) {
          match = cand;
          take = len;
          break;
        }
      }
      if (match < 0) {
        ok = false;
        break;
      }
      cover.push_back(match);
      pos += take;
    }
    if (ok && !cover.empty()) {
      ids.insert(ids.end(), cover.begin(), cover.end());
    } else {
      ids.push_back(vocab.unk_id);
    }
  }
  return ids;
}

// Frequency-based vocabulary builder: the five specials, then the most
// frequent pieces of the given texts (ties broken lexicographically).
inline Vocabulary build_vocabulary(const std::vector<std::string>& texts,
                                   std::size_t max_size) {
  if (max_size < 6) throw Error(ErrorCode::InvalidConfig, "vocabulary size too small");
  std::map<std::string, std::uint64_t> counts;
  for (const auto& text : texts) {
    for (const auto& piece : pre_split(text)) {
      if (piece == Vocabulary::kPad || piece == Vocabulary::kUnk ||
          piece == Vocabulary::kMask || piece == Vocabulary::kSep ||
          piece == Vocabulary::kCls) {
        continue;
      }
      ++counts[piece];
    }
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(),
                                                            counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  std::vector<std::string> toks = {Vocabulary::kPad, Vocabulary::kUnk,
                                   Vocabulary::kMask, Vocabulary::kSep,
                                   Vocabulary::kCls};
  for (const auto& [tok, count] : ranked) {
    if (toks.size() >= max_size) break;
    toks.push_back(tok);
  }
  return Vocabulary::from_tokens(std::move(toks));
}

// [CLS] ids [SEP], right-truncated to fit max_len.
inline TokenIds encode_with_specials(const std::string& text,
                                     const Vocabulary& vocab,
                                     std::size_t max_len) {
  TokenIds body = tokenize(text, vocab);
  if (body.size() + 2 > max_len) body.resize(max_len - 2);
  TokenIds ids;
  ids.reserve(body.size() + 2);
  ids.push_back(vocab.cls_id);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(vocab.sep_id);
  return ids;
}

}  // namespace clozepet
