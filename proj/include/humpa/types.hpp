#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace humpa {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;
using TokenSpan = std::span<const TokenId>;

// Per-token log-probabilities over a vocabulary. Entries are <= 0 and
// log-sum-exp to 0.
using LogDistribution = std::vector<double>;

inline TokenSequence concat(TokenSpan a, TokenSpan b) {
  TokenSequence out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace humpa
