#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "humpa/language_model.hpp"

namespace humpa {

// Character/word n-gram model with add-k smoothing at every order and
// Witten-Bell style interpolation towards the next lower order:
//
//   p_1(v)   = (c(v) + k) / (N + kV)
//   p_m(v|h) = l_h * (c(h,v) + k) / (c(h) + kV) + (1 - l_h) * p_{m-1}(v|h')
//   l_h      = c(h) / (c(h) + g * u(h))
//
// where u(h) is the number of distinct tokens observed after h, h' drops
// the oldest token of h and g is the back-off strength (g = 1 is
// Witten-Bell; smaller g trusts observed histories more). Unseen contexts
// take the lower-order conditional unchanged.
class NGramModel final : public LanguageModel {
 public:
  struct ContextCounts {
    std::vector<std::uint32_t> counts;  // length V
    std::uint64_t total = 0;
    std::uint32_t distinct = 0;

    friend bool operator==(const ContextCounts&, const ContextCounts&) = default;
  };

  NGramModel(std::size_t vocab_size, int order, double k, double backoff = 1.0)
      : vocab_size_(vocab_size), order_(order), k_(k), backoff_(backoff) {
    if (order < 1) throw std::invalid_argument("n-gram order must be >= 1");
    if (!(k > 0.0) || !std::isfinite(k)) throw std::invalid_argument("smoothing constant k must be positive");
    if (!(backoff > 0.0) || !std::isfinite(backoff)) throw std::invalid_argument("back-off strength must be positive");
    if (vocab_size == 0) throw std::invalid_argument("vocabulary size must be positive");
    tables_.resize(static_cast<std::size_t>(order));
  }

  static NGramModel fit(const std::vector<TokenSequence>& corpus, int order, double k, std::size_t vocab_size,
                        double backoff = 1.0) {
    NGramModel model(vocab_size, order, k, backoff);
    std::size_t tokens = 0;
    for (const auto& seq : corpus) {
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] >= vocab_size) throw std::out_of_range("corpus token id out of range");
        for (int m = 1; m <= order; ++m) {
          const std::size_t hist = static_cast<std::size_t>(m - 1);
          if (i < hist) break;
          model.add_count(m, TokenSpan(seq).subspan(i - hist, hist), seq[i]);
        }
        ++tokens;
      }
    }
    if (tokens == 0) throw std::invalid_argument("fit_ngram: empty corpus");
    return model;
  }

  std::size_t vocab_size() const override { return vocab_size_; }
  std::optional<std::size_t> context_window() const override { return static_cast<std::size_t>(order_ - 1); }

  int order() const { return order_; }
  double k() const { return k_; }
  double backoff() const { return backoff_; }

  LogDistribution next_logprobs(TokenSpan context) const override {
    check_tokens(context);
    std::vector<double> p(vocab_size_);
    const double kv = k_ * static_cast<double>(vocab_size_);
    const ContextCounts* uni = find_counts(1, {});
    const double n_total = uni ? static_cast<double>(uni->total) : 0.0;
    for (std::size_t v = 0; v < vocab_size_; ++v) {
      const double c = uni ? uni->counts[v] : 0.0;
      p[v] = (c + k_) / (n_total + kv);
    }
    const std::size_t max_hist = std::min<std::size_t>(static_cast<std::size_t>(order_ - 1), context.size());
    for (std::size_t hist = 1; hist <= max_hist; ++hist) {
      const ContextCounts* cc = find_counts(static_cast<int>(hist + 1), context.subspan(context.size() - hist));
      if (!cc) continue;
      const double ch = static_cast<double>(cc->total);
      const double lambda = ch / (ch + backoff_ * static_cast<double>(cc->distinct));
      const double denom = ch + kv;
      for (std::size_t v = 0; v < vocab_size_; ++v)
        p[v] = lambda * (cc->counts[v] + k_) / denom + (1.0 - lambda) * p[v];
    }
    for (double& x : p) x = std::log(x);
    return p;
  }

  // Raw table access for serialization and tests. Index 0 holds unigrams.
  using Table = std::unordered_map<std::string, ContextCounts>;
  const std::vector<Table>& tables() const { return tables_; }

  void set_counts(int m, TokenSpan history, ContextCounts counts) {
    if (counts.counts.size() != vocab_size_) throw std::invalid_argument("count row has wrong length");
    tables_.at(static_cast<std::size_t>(m - 1))[encode(history)] = std::move(counts);
  }

  static std::string encode(TokenSpan history) {
    std::string key(history.size() * sizeof(TokenId), '\0');
    for (std::size_t i = 0; i < history.size(); ++i) {
      const TokenId t = history[i];
      for (std::size_t b = 0; b < sizeof(TokenId); ++b)
        key[i * sizeof(TokenId) + b] = static_cast<char>((t >> (8 * b)) & 0xff);
    }
    return key;
  }

  static TokenSequence decode(const std::string& key) {
    TokenSequence out(key.size() / sizeof(TokenId));
    for (std::size_t i = 0; i < out.size(); ++i) {
      TokenId t = 0;
      for (std::size_t b = 0; b < sizeof(TokenId); ++b)
        t |= static_cast<TokenId>(static_cast<unsigned char>(key[i * sizeof(TokenId) + b])) << (8 * b);
      out[i] = t;
    }
    return out;
  }

  const ContextCounts* find_counts(int m, TokenSpan history) const {
    const auto& table = tables_[static_cast<std::size_t>(m - 1)];
    auto it = table.find(encode(history));
    return it == table.end() ? nullptr : &it->second;
  }

  friend bool operator==(const NGramModel& a, const NGramModel& b) {
    return a.vocab_size_ == b.vocab_size_ && a.order_ == b.order_ && a.k_ == b.k_ && a.backoff_ == b.backoff_ && a.tables_ == b.tables_;
  }

 private:
  void add_count(int m, TokenSpan history, TokenId next) {
    auto& cc = tables_[static_cast<std::size_t>(m - 1)][encode(history)];
    if (cc.counts.empty()) cc.counts.assign(vocab_size_, 0);
    if (cc.counts[next]++ == 0) ++cc.distinct;
    ++cc.total;
  }

  std::size_t vocab_size_;
  int order_;
  double k_;
  double backoff_;
  std::vector<Table> tables_;
};

inline NGramModel fit_ngram(const std::vector<TokenSequence>& corpus, int order, double k, std::size_t vocab_size,
                            double backoff = 1.0) {
  return NGramModel::fit(corpus, order, k, vocab_size, backoff);
}

}  // namespace humpa
