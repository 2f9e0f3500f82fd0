#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "humpa/language_model.hpp"

namespace humpa {

// Exact distribution over every length-T response for one prompt. Outcomes
// are listed in lexicographic order of token ids.
struct SequenceDistribution {
  std::vector<TokenSequence> outcomes;
  std::vector<double> probs;

  double total() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
};

inline double total_variation(const SequenceDistribution& a, const SequenceDistribution& b) {
  if (a.outcomes != b.outcomes) throw std::invalid_argument("total_variation: outcome sets differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.probs.size(); ++i) s += std::abs(a.probs[i] - b.probs[i]);
  return 0.5 * s;
}

// All V^T sequences in lexicographic order.
inline std::vector<TokenSequence> enumerate_sequences(std::size_t vocab, std::size_t horizon,
                                                      std::size_t cap = 1u << 20) {
  double count = std::pow(static_cast<double>(vocab), static_cast<double>(horizon));
  if (count > static_cast<double>(cap)) throw std::length_error("enumeration space too large");
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  TokenSequence cur(horizon, 0);
  for (std::size_t n = 0; n < static_cast<std::size_t>(count); ++n) {
    out.push_back(cur);
    for (std::size_t pos = horizon; pos-- > 0;) {
      if (++cur[pos] < vocab) break;
      cur[pos] = 0;
    }
  }
  return out;
}

// Policy over a small vocabulary with an explicit table of conditionals keyed
// by the full context (prompt plus generated prefix). Contexts absent from
// the table are uniform.
class EnumerablePolicy final : public LanguageModel {
 public:
  EnumerablePolicy(std::size_t vocab, std::size_t horizon) : vocab_(vocab), horizon_(horizon) {
    if (vocab == 0) throw std::invalid_argument("EnumerablePolicy: empty vocabulary");
  }

  static EnumerablePolicy uniform(std::size_t vocab, std::size_t horizon) { return EnumerablePolicy(vocab, horizon); }

  // Random logits (uniform in [-scale, scale]) for every context reachable
  // from each prompt within the horizon.
  static EnumerablePolicy random(std::size_t vocab, std::size_t horizon, const std::vector<TokenSequence>& prompts,
                                 std::uint64_t seed, double scale = 2.0) {
    EnumerablePolicy p(vocab, horizon);
    Rng rng(seed);
    for (const auto& x : prompts) {
      for (std::size_t len = 0; len < horizon; ++len) {
        for (const auto& prefix : enumerate_sequences(vocab, len)) {
          LogDistribution logits(vocab);
          for (double& l : logits) l = scale * (2.0 * rng.uniform() - 1.0);
          p.set_conditional(concat(x, prefix), log_normalize(std::move(logits)));
        }
      }
    }
    return p;
  }

  // Per-step conditionals that reproduce a sequence-level distribution by
  // marginalization: pi(v | x, y_<t) = P(y_<t v) / P(y_<t). Prefixes with
  // zero mass get uniform conditionals.
  static EnumerablePolicy from_sequence_distribution(std::size_t vocab, TokenSpan prompt,
                                                     const SequenceDistribution& dist) {
    std::size_t horizon = dist.outcomes.empty() ? 0 : dist.outcomes.front().size();
    EnumerablePolicy p(vocab, horizon);
    p.add_sequence_distribution(prompt, dist);
    return p;
  }

  void add_sequence_distribution(TokenSpan prompt, const SequenceDistribution& dist) {
    const std::size_t horizon = dist.outcomes.empty() ? 0 : dist.outcomes.front().size();
    for (std::size_t len = 0; len < horizon; ++len) {
      std::map<TokenSequence, std::vector<double>> mass;
      for (std::size_t i = 0; i < dist.outcomes.size(); ++i) {
        const auto& y = dist.outcomes[i];
        auto& row = mass[TokenSequence(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(len))];
        if (row.empty()) row.assign(vocab_, 0.0);
        row[y[len]] += dist.probs[i];
      }
      for (auto& [prefix, row] : mass) {
        double z = 0.0;
        for (double m : row) z += m;
        LogDistribution lp(vocab_);
        for (std::size_t v = 0; v < vocab_; ++v)
          lp[v] = z > 0.0 ? std::log(row[v] / z) : -std::log(static_cast<double>(vocab_));
        set_conditional(concat(prompt, prefix), std::move(lp));
      }
    }
  }

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t horizon() const { return horizon_; }

  void set_conditional(TokenSequence context, LogDistribution logprobs) {
    if (logprobs.size() != vocab_) throw std::invalid_argument("conditional has wrong length");
    table_[std::move(context)] = std::move(logprobs);
  }

  LogDistribution next_logprobs(TokenSpan context) const override {
    check_tokens(context);
    auto it = table_.find(TokenSequence(context.begin(), context.end()));
    if (it != table_.end()) return it->second;
    return LogDistribution(vocab_, -std::log(static_cast<double>(vocab_)));
  }

  const std::map<TokenSequence, LogDistribution>& table() const { return table_; }

 private:
  std::size_t vocab_;
  std::size_t horizon_;
  std::map<TokenSequence, LogDistribution> table_;
};

// Exact distribution of `model` over all length-`horizon` responses to
// `prompt`, computed as products of the model's own conditionals.
inline SequenceDistribution exact_seq_distribution(const LanguageModel& model, TokenSpan prompt, std::size_t horizon,
                                                   std::size_t cap = 1u << 20) {
  const std::size_t vocab = model.vocab_size();
  SequenceDistribution out;
  out.outcomes = enumerate_sequences(vocab, horizon, cap);
  out.probs.reserve(out.outcomes.size());
  TokenSequence ctx(prompt.begin(), prompt.end());
  // Depth-first walk reusing each prefix's conditional for its children.
  std::function<void(double)> walk = [&](double logp) {
    if (ctx.size() - prompt.size() == horizon) {
      out.probs.push_back(std::exp(logp));
      return;
    }
    const LogDistribution lp = model.next_logprobs(ctx);
    for (std::size_t v = 0; v < vocab; ++v) {
      ctx.push_back(static_cast<TokenId>(v));
      walk(logp + lp[v]);
      ctx.pop_back();
    }
  };
  walk(0.0);
  return out;
}

inline SequenceDistribution exact_seq_distribution(const EnumerablePolicy& policy, TokenSpan prompt) {
  return exact_seq_distribution(static_cast<const LanguageModel&>(policy), prompt, policy.horizon());
}

}  // namespace humpa
