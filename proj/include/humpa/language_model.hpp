#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

#include "humpa/rng.hpp"
#include "humpa/types.hpp"

namespace humpa {

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// Shifts logits so they log-sum-exp to zero.
inline LogDistribution log_normalize(LogDistribution logits) {
  const double z = log_sum_exp(logits);
  if (!std::isfinite(z)) throw std::domain_error("log_normalize: degenerate logits");
  for (double& x : logits) x -= z;
  return logits;
}

inline bool is_valid_log_distribution(std::span<const double> lp, double tol = 1e-9) {
  if (lp.empty()) return false;
  for (double x : lp)
    if (std::isnan(x) || x > 1e-12) return false;
  return std::abs(log_sum_exp(lp)) <= tol;
}

// Anything that can produce next-token log-distributions over a fixed
// vocabulary. Implementations are immutable once built, so concurrent
// readers are safe.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;

  // `context` is the full conditioning prefix (prompt followed by any
  // already-generated response tokens).
  virtual LogDistribution next_logprobs(TokenSpan context) const = 0;

  // Number of trailing context tokens the output depends on, if bounded.
  virtual std::optional<std::size_t> context_window() const { return std::nullopt; }

 protected:
  void check_tokens(TokenSpan context) const {
    const std::size_t v = vocab_size();
    for (TokenId t : context)
      if (t >= v) throw std::out_of_range("invalid token id " + std::to_string(t));
  }
};

inline LogDistribution next_logprobs(const LanguageModel& model, TokenSpan context) {
  return model.next_logprobs(context);
}

inline double sequence_logprob(const LanguageModel& model, TokenSpan prompt, TokenSpan response) {
  if (response.empty()) return 0.0;
  TokenSequence ctx(prompt.begin(), prompt.end());
  ctx.reserve(prompt.size() + response.size());
  double total = 0.0;
  for (TokenId tok : response) {
    if (tok >= model.vocab_size()) throw std::out_of_range("invalid token id " + std::to_string(tok));
    total += model.next_logprobs(ctx)[tok];
    ctx.push_back(tok);
  }
  return total;
}

// 1-based rank of `token` when tokens are sorted by probability descending,
// ties broken by ascending id.
inline std::size_t rank_of(std::span<const double> logprobs, TokenId token) {
  if (token >= logprobs.size()) throw std::out_of_range("rank_of: invalid token");
  const double lt = logprobs[token];
  std::size_t rank = 1;
  for (std::size_t v = 0; v < logprobs.size(); ++v) {
    if (logprobs[v] > lt || (logprobs[v] == lt && v < token)) ++rank;
  }
  return rank;
}

inline std::size_t rank_of(const LanguageModel& model, TokenSpan context, TokenId token) {
  return rank_of(model.next_logprobs(context), token);
}

inline TokenId argmax_token(std::span<const double> logprobs) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < logprobs.size(); ++v)
    if (logprobs[v] > logprobs[best]) best = v;
  return static_cast<TokenId>(best);
}

// Draws one token at the given temperature. Temperature 0 is greedy with
// lowest-id tie-break; otherwise log-probabilities are divided by the
// temperature and renormalized.
inline TokenId sample_token(std::span<const double> logprobs, double temperature, Rng& rng) {
  if (temperature < 0.0 || std::isnan(temperature)) throw std::invalid_argument("negative temperature");
  if (temperature == 0.0) return argmax_token(logprobs);
  const double inv_t = 1.0 / temperature;
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logprobs) m = std::max(m, x * inv_t);
  double total = 0.0;
  for (double x : logprobs) total += std::exp(x * inv_t - m);
  const double u = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t v = 0; v < logprobs.size(); ++v) {
    const double w = std::exp(logprobs[v] * inv_t - m);
    if (w > 0.0) last_positive = v;
    acc += w;
    if (u < acc) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(last_positive);
}

inline TokenSequence sample(const LanguageModel& model, TokenSpan prompt, std::size_t max_len, double temperature,
                            Rng& rng) {
  if (temperature < 0.0 || std::isnan(temperature)) throw std::invalid_argument("negative temperature");
  TokenSequence ctx(prompt.begin(), prompt.end());
  TokenSequence out;
  out.reserve(max_len);
  for (std::size_t i = 0; i < max_len; ++i) {
    TokenId tok = sample_token(model.next_logprobs(ctx), temperature, rng);
    out.push_back(tok);
    ctx.push_back(tok);
  }
  return out;
}

inline TokenSequence sample(const LanguageModel& model, TokenSpan prompt, std::size_t max_len, double temperature,
                            std::uint64_t seed) {
  Rng rng(seed);
  return sample(model, prompt, max_len, temperature, rng);
}

}  // namespace humpa
