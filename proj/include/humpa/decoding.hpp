#pragma once

#include <memory>
#include <stdexcept>

#include "humpa/language_model.hpp"

namespace humpa {

// Large reference model steered by the log-ratio between a tuned and an
// untuned small model:
//
//   log p'(v | ctx) = log_softmax[ l_large(v) + alpha * (l_tuned(v) - l_ref(v)) ]
//
// which is the normalized product p_large * (p_tuned / p_ref)^alpha.
class ProxyEnsemble final : public LanguageModel {
 public:
  // Log-probabilities below this floor make the log-ratio unreliable; such
  // ratios are clamped to +/- kLogFloor.
  static constexpr double kLogFloor = 60.0;

  ProxyEnsemble(std::shared_ptr<const LanguageModel> large_ref, std::shared_ptr<const LanguageModel> small_tuned,
                std::shared_ptr<const LanguageModel> small_ref, double alpha)
      : large_(std::move(large_ref)), tuned_(std::move(small_tuned)), ref_(std::move(small_ref)), alpha_(alpha) {
    if (!large_ || !tuned_ || !ref_) throw std::invalid_argument("ProxyEnsemble: null model");
    if (!std::isfinite(alpha) || alpha < 0.0) throw std::invalid_argument("ProxyEnsemble: alpha must be finite and >= 0");
    if (large_->vocab_size() != tuned_->vocab_size() || large_->vocab_size() != ref_->vocab_size())
      throw std::invalid_argument("ProxyEnsemble: vocabulary mismatch");
  }

  std::size_t vocab_size() const override { return large_->vocab_size(); }

  std::optional<std::size_t> context_window() const override {
    auto a = large_->context_window(), b = tuned_->context_window(), c = ref_->context_window();
    if (!a || !b || !c) return std::nullopt;
    return std::max({*a, *b, *c});
  }

  double alpha() const { return alpha_; }
  const LanguageModel& large_ref() const { return *large_; }
  const LanguageModel& small_tuned() const { return *tuned_; }
  const LanguageModel& small_ref() const { return *ref_; }

  LogDistribution next_logprobs(TokenSpan context) const override {
    LogDistribution out = large_->next_logprobs(context);
    if (alpha_ == 0.0 || tuned_ == ref_) return out;
    const LogDistribution lt = tuned_->next_logprobs(context);
    const LogDistribution lr = ref_->next_logprobs(context);
    for (std::size_t v = 0; v < out.size(); ++v) {
      double ratio = lt[v] - lr[v];
      if (std::isnan(ratio)) ratio = 0.0;  // both -inf
      if (lt[v] < -kLogFloor || lr[v] < -kLogFloor) ratio = std::clamp(ratio, -kLogFloor, kLogFloor);
      out[v] += alpha_ * ratio;
    }
    return log_normalize(std::move(out));
  }

 private:
  std::shared_ptr<const LanguageModel> large_;
  std::shared_ptr<const LanguageModel> tuned_;
  std::shared_ptr<const LanguageModel> ref_;
  double alpha_;
};

inline LogDistribution proxy_logprobs(const ProxyEnsemble& ensemble, TokenSpan context) {
  return ensemble.next_logprobs(context);
}

// Temperature is applied to the combined distribution.
inline TokenSequence proxy_generate(const ProxyEnsemble& ensemble, TokenSpan prompt, std::size_t max_len,
                                    double temperature, std::uint64_t seed) {
  return sample(ensemble, prompt, max_len, temperature, seed);
}

}  // namespace humpa
