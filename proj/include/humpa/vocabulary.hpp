#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "humpa/types.hpp"

namespace humpa {

enum class TokenizerMode { character, word };

inline std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::character ? "character" : "whitespace-word";
}

inline TokenizerMode tokenizer_mode_from_string(std::string_view s) {
  if (s == "character" || s == "char") return TokenizerMode::character;
  if (s == "whitespace-word" || s == "word") return TokenizerMode::word;
  throw std::invalid_argument("unknown tokenizer mode: " + std::string(s));
}

namespace detail {

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;  // stray continuation byte, treated as its own symbol
}

inline std::vector<std::string_view> split_symbols(std::string_view text, TokenizerMode mode) {
  std::vector<std::string_view> out;
  if (mode == TokenizerMode::character) {
    for (std::size_t i = 0; i < text.size();) {
      std::size_t n = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
      out.push_back(text.substr(i, n));
      i += n;
    }
    return out;
  }
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace detail

// Ordered set of distinct token strings. The last id (size() - 1) is always
// the reserved unknown token.
class Vocabulary {
 public:
  static constexpr std::string_view kUnk = "<unk>";

  Vocabulary(std::vector<std::string> symbols, TokenizerMode mode) : tokens_(std::move(symbols)), mode_(mode) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i] == kUnk) throw std::invalid_argument("vocabulary symbol collides with <unk>");
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw std::invalid_argument("duplicate vocabulary symbol: " + tokens_[i]);
    }
    tokens_.emplace_back(kUnk);
  }

  // Collects every distinct symbol in the texts, sorted bytewise.
  static Vocabulary from_texts(const std::vector<std::string>& texts, TokenizerMode mode) {
    std::set<std::string, std::less<>> seen;
    for (const auto& t : texts)
      for (auto sym : detail::split_symbols(t, mode)) seen.emplace(sym);
    return Vocabulary(std::vector<std::string>(seen.begin(), seen.end()), mode);
  }

  std::size_t size() const { return tokens_.size(); }
  // Number of real symbols, excluding <unk>.
  std::size_t symbol_count() const { return tokens_.size() - 1; }
  TokenId unk() const { return static_cast<TokenId>(tokens_.size() - 1); }
  TokenizerMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw std::out_of_range("token id out of range");
    return tokens_[id];
  }

  std::optional<TokenId> find(std::string_view symbol) const {
    auto it = index_.find(std::string(symbol));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id_of(std::string_view symbol) const { return find(symbol).value_or(unk()); }

  // Symbols only (no <unk>), in id order.
  std::vector<std::string> symbols() const { return {tokens_.begin(), tokens_.end() - 1}; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.mode_ == b.mode_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenizerMode mode_;
};

inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  if (vocab.symbol_count() == 0) throw std::invalid_argument("tokenize: empty vocabulary");
  TokenSequence ids;
  for (auto sym : detail::split_symbols(text, vocab.mode())) ids.push_back(vocab.id_of(sym));
  return ids;
}

inline std::string detokenize(TokenSpan ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.mode() == TokenizerMode::word && i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace humpa
