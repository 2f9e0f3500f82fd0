#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "humpa/ngram_model.hpp"

namespace humpa {

// Dense gradient buffer that remembers which coordinates were touched so it
// can be cleared cheaply between mini-batches.
class SparseGradient {
 public:
  explicit SparseGradient(std::size_t dim) : values_(dim, 0.0), seen_(dim, 0) {}

  void add(std::size_t i, double v) {
    if (!seen_[i]) {
      seen_[i] = 1;
      touched_.push_back(i);
    }
    values_[i] += v;
  }

  void clear() {
    for (std::size_t i : touched_) {
      values_[i] = 0.0;
      seen_[i] = 0;
    }
    touched_.clear();
  }

  std::size_t dim() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  const std::vector<std::size_t>& touched() const { return touched_; }

 private:
  std::vector<double> values_;
  std::vector<unsigned char> seen_;
  std::vector<std::size_t> touched_;
};

// Trainable small model: a frozen n-gram base plus one hashed weight per
// (last n-1 context ids, candidate id) feature, added to the base
// log-probabilities before renormalizing.
//
// With the context feature enabled there is one more parameter, theta, on
// the base model's pointwise context association log p_base(v|ctx) - log
// p_base(v):
//
//   logits = log p_base + theta * (log p_base - log p_unigram) + w
//
// Hashed weights only move contexts seen in training; theta strengthens or
// weakens the pull of every context at once (theta = -1 leaves the base's
// unigram distribution). It sits at index buckets() of the parameter vector.
class HashedLogLinearLM final : public LanguageModel {
 public:
  HashedLogLinearLM(std::shared_ptr<const NGramModel> base, std::size_t buckets, bool context_feature = false)
      : base_(std::move(base)), weights_(buckets, 0.0), context_feature_(context_feature) {
    if (!base_) throw std::invalid_argument("HashedLogLinearLM needs a base model");
    if (buckets == 0) throw std::invalid_argument("bucket count must be positive");
    if (context_feature_) unigram_ = base_->next_logprobs({});
  }

  std::size_t vocab_size() const override { return base_->vocab_size(); }
  std::optional<std::size_t> context_window() const override { return base_->context_window(); }

  const NGramModel& base() const { return *base_; }
  const std::shared_ptr<const NGramModel>& base_ptr() const { return base_; }
  std::size_t buckets() const { return weights_.size(); }
  std::size_t history_length() const { return static_cast<std::size_t>(base_->order() - 1); }
  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& mutable_weights() { return weights_; }
  bool has_context_feature() const { return context_feature_; }
  double context_weight() const { return theta_; }
  void set_context_weight(double theta) {
    if (!context_feature_ && theta != 0.0) throw std::invalid_argument("HashedLogLinearLM: context feature is disabled");
    theta_ = theta;
  }
  std::size_t parameter_count() const { return weights_.size() + (context_feature_ ? 1 : 0); }
  double parameter(std::size_t i) const { return i < weights_.size() ? weights_[i] : theta_; }
  void add_to_parameter(std::size_t i, double delta) {
    if (i < weights_.size()) weights_[i] += delta;
    else if (context_feature_ && i == weights_.size()) theta_ += delta;
    else throw std::out_of_range("HashedLogLinearLM: parameter index");
  }

  std::size_t bucket(TokenSpan context, TokenId candidate) const {
    return static_cast<std::size_t>(feature_hash(context, candidate) % weights_.size());
  }

  LogDistribution next_logprobs(TokenSpan context) const override {
    LogDistribution base_lp = base_->next_logprobs(context);
    const std::vector<std::size_t> idx = buckets_for(context);
    bool any = theta_ != 0.0;
    for (std::size_t b : idx) any = any || weights_[b] != 0.0;
    if (!any) return base_lp;
    for (std::size_t v = 0; v < base_lp.size(); ++v) {
      if (theta_ != 0.0) base_lp[v] += theta_ * (base_lp[v] - unigram_[v]);
      base_lp[v] += weights_[idx[v]];
    }
    return log_normalize(std::move(base_lp));
  }

  // Adds coef * d log pi(token | context) / d weights into `grad` and
  // returns log pi(token | context).
  double accumulate_logprob_gradient(TokenSpan context, TokenId token, double coef, SparseGradient& grad) const {
    const LogDistribution lp = next_logprobs(context);
    const std::vector<std::size_t> idx = buckets_for(context);
    grad.add(idx[token], coef);
    for (std::size_t v = 0; v < lp.size(); ++v) grad.add(idx[v], -coef * std::exp(lp[v]));
    if (context_feature_) {
      const LogDistribution base_lp = base_->next_logprobs(context);
      double expected = 0.0;
      for (std::size_t v = 0; v < lp.size(); ++v) expected += std::exp(lp[v]) * (base_lp[v] - unigram_[v]);
      grad.add(weights_.size(), coef * (base_lp[token] - unigram_[token] - expected));
    }
    return lp[token];
  }

  // Sequence version of the above: gradient of log pi(response | prompt).
  double accumulate_sequence_gradient(TokenSpan prompt, TokenSpan response, double coef, SparseGradient& grad) const {
    TokenSequence ctx(prompt.begin(), prompt.end());
    double total = 0.0;
    for (TokenId tok : response) {
      total += accumulate_logprob_gradient(ctx, tok, coef, grad);
      ctx.push_back(tok);
    }
    return total;
  }

 private:
  static std::uint64_t fnv_extend(std::uint64_t h, std::uint32_t x) {
    for (int b = 0; b < 4; ++b) {
      h ^= (x >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t history_state(TokenSpan context) const {
    const std::size_t hist = history_length();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < hist; ++i) {
      const std::size_t back = hist - i;  // distance from the end of the context
      h = fnv_extend(h, back <= context.size() ? context[context.size() - back] : 0xFFFFFFFFu);
    }
    return h;
  }

  std::uint64_t feature_hash(TokenSpan context, TokenId candidate) const {
    return fnv_extend(history_state(context), candidate);
  }

  std::vector<std::size_t> buckets_for(TokenSpan context) const {
    const std::uint64_t h = history_state(context);
    std::vector<std::size_t> idx(vocab_size());
    for (std::size_t v = 0; v < idx.size(); ++v)
      idx[v] = static_cast<std::size_t>(fnv_extend(h, static_cast<std::uint32_t>(v)) % weights_.size());
    return idx;
  }

  std::shared_ptr<const NGramModel> base_;
  std::vector<double> weights_;
  bool context_feature_ = false;
  LogDistribution unigram_;
  double theta_ = 0.0;
};

}  // namespace humpa
