#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "humpa/language_model.hpp"

namespace humpa {

enum class Provenance { human, machine_ref, machine_attacked };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::human: return "human";
    case Provenance::machine_ref: return "machine_ref";
    case Provenance::machine_attacked: return "machine_attacked";
  }
  return "unknown";
}

struct Passage {
  std::string id;
  TokenSequence prompt;
  TokenSequence response;
  Provenance provenance = Provenance::human;
};

struct DetectorConfig {
  int n_perturbations = 100;
  double mask_fraction = 0.15;
  std::size_t span_length = 2;
  double dna_truncation_ratio = 0.2;
  int dna_completions = 10;
  std::size_t dna_min_ngram = 3;
  std::size_t dna_max_ngram = 8;
  double dna_temperature = 1.0;
  double perturbation_temperature = 1.0;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_perturbations < 1) throw std::invalid_argument("DetectorConfig: n_perturbations must be >= 1");
    if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw std::invalid_argument("DetectorConfig: mask_fraction outside [0,1)");
    if (span_length < 1) throw std::invalid_argument("DetectorConfig: span_length must be >= 1");
    if (!(dna_truncation_ratio > 0.0 && dna_truncation_ratio < 1.0))
      throw std::invalid_argument("DetectorConfig: dna_truncation_ratio outside (0,1)");
    if (dna_completions < 1) throw std::invalid_argument("DetectorConfig: dna_completions must be >= 1");
    if (dna_min_ngram < 1 || dna_max_ngram < dna_min_ngram) throw std::invalid_argument("DetectorConfig: bad dna n-gram range");
    if (!(epsilon > 0.0)) throw std::invalid_argument("DetectorConfig: epsilon must be positive");
  }
};

// Thrown when a passage cannot be scored by a detector (e.g. too short);
// callers skip the passage and record the reason.
class DetectorSkip : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::uint64_t passage_seed(std::uint64_t master, const Passage& p) {
  return derive_seed(master, {fnv1a64(p.id)});
}

// Log-probability and rank of each observed response token.
struct TokenStats {
  std::vector<double> logprob;
  std::vector<double> log_rank;

  double total_logprob() const { return std::accumulate(logprob.begin(), logprob.end(), 0.0); }
  double total_log_rank() const { return std::accumulate(log_rank.begin(), log_rank.end(), 0.0); }
  double mean_log_rank() const { return log_rank.empty() ? 0.0 : total_log_rank() / static_cast<double>(log_rank.size()); }
};

inline TokenStats token_stats(const LanguageModel& model, TokenSpan prompt, TokenSpan response) {
  TokenStats st;
  st.logprob.reserve(response.size());
  st.log_rank.reserve(response.size());
  TokenSequence ctx(prompt.begin(), prompt.end());
  for (TokenId tok : response) {
    const LogDistribution lp = model.next_logprobs(ctx);
    if (tok >= lp.size()) throw std::out_of_range("invalid token id");
    st.logprob.push_back(lp[tok]);
    st.log_rank.push_back(std::log(static_cast<double>(rank_of(lp, tok))));
    ctx.push_back(tok);
  }
  return st;
}

// Stats for `response`, a copy of `base_response` with some tokens replaced,
// reusing `base` wherever the model's bounded context window guarantees the
// conditional is unchanged. Falls back to a full pass for unbounded models.
inline TokenStats token_stats_edited(const LanguageModel& model, TokenSpan prompt, TokenSpan base_response,
                                     const TokenStats& base, TokenSpan response) {
  const auto window = model.context_window();
  if (!window || base_response.size() != response.size()) return token_stats(model, prompt, response);
  const std::size_t w = *window;
  TokenStats st = base;
  TokenSequence ctx(prompt.begin(), prompt.end());
  ctx.insert(ctx.end(), response.begin(), response.end());
  std::size_t last_diff = SIZE_MAX;
  for (std::size_t t = 0; t < response.size(); ++t) {
    if (response[t] != base_response[t]) last_diff = t;
    if (last_diff == SIZE_MAX || t - last_diff > w) continue;
    const LogDistribution lp = model.next_logprobs(TokenSpan(ctx).first(prompt.size() + t));
    st.logprob[t] = lp[response[t]];
    st.log_rank[t] = std::log(static_cast<double>(rank_of(lp, response[t])));
  }
  return st;
}

inline void require_response(const Passage& p) {
  if (p.response.empty()) throw std::invalid_argument("detector: empty response");
}

// ---- Likelihood / LogRank / LRR -------------------------------------------

inline double likelihood_score(const Passage& p, const LanguageModel& scoring) {
  require_response(p);
  return sequence_logprob(scoring, p.prompt, p.response) / static_cast<double>(p.response.size());
}

inline double likelihood_from(const TokenStats& st) {
  return st.total_logprob() / static_cast<double>(st.logprob.size());
}

inline double logrank_from(const TokenStats& st) { return -st.mean_log_rank(); }

inline double logrank_score(const Passage& p, const LanguageModel& scoring) {
  require_response(p);
  return logrank_from(token_stats(scoring, p.prompt, p.response));
}

inline double lrr_from(const TokenStats& st, double epsilon) {
  return -st.total_logprob() / std::max(st.total_log_rank(), epsilon);
}

inline double lrr_score(const Passage& p, const LanguageModel& scoring, const DetectorConfig& config = {}) {
  require_response(p);
  return lrr_from(token_stats(scoring, p.prompt, p.response), config.epsilon);
}

// ---- Perturbation ----------------------------------------------------------

inline std::size_t perturbation_span_count(std::size_t length, const DetectorConfig& config) {
  const double raw = std::ceil(config.mask_fraction * static_cast<double>(length) / static_cast<double>(config.span_length));
  return std::min(static_cast<std::size_t>(raw), length / config.span_length);
}

// Masks ceil(mask_fraction * T / span_length) non-overlapping spans chosen
// uniformly among all such placements, then refills each span left to right
// by sampling from `filler` conditioned on everything to its left.
inline Passage perturb(const Passage& p, const LanguageModel& filler, const DetectorConfig& config, std::uint64_t seed) {
  const std::size_t len = p.response.size();
  const std::size_t span = config.span_length;
  if (len < span) throw DetectorSkip("perturb: response shorter than one span");
  const std::size_t k = perturbation_span_count(len, config);
  Passage out = p;
  if (k == 0) return out;
  Rng rng(seed);
  // Uniform placement of k spans of length L in T slots: choose k of the
  // T - k*L + k "gap or span" slots, then expand.
  const std::size_t slots = len - k * span + k;
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  for (std::size_t i = slots - k; i < slots; ++i) {  // Floyd's algorithm
    std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
    if (std::find(chosen.begin(), chosen.end(), j) != chosen.end()) j = i;
    chosen.push_back(j);
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<std::size_t> starts(k);
  for (std::size_t i = 0; i < k; ++i) starts[i] = chosen[i] + i * (span - 1);

  TokenSequence ctx = p.prompt;
  ctx.insert(ctx.end(), p.response.begin(), p.response.end());
  const std::size_t off = p.prompt.size();
  for (std::size_t s : starts) {
    for (std::size_t t = s; t < s + span; ++t) {
      const LogDistribution lp = filler.next_logprobs(TokenSpan(ctx).first(off + t));
      ctx[off + t] = sample_token(lp, config.perturbation_temperature, rng);
    }
  }
  out.response.assign(ctx.begin() + static_cast<std::ptrdiff_t>(off), ctx.end());
  return out;
}

inline std::vector<Passage> perturbation_set(const Passage& p, const LanguageModel& filler, const DetectorConfig& config) {
  const std::uint64_t base = passage_seed(config.seed, p);
  std::vector<Passage> out;
  out.reserve(static_cast<std::size_t>(config.n_perturbations));
  for (int k = 0; k < config.n_perturbations; ++k)
    out.push_back(perturb(p, filler, config, derive_seed(base, {static_cast<std::uint64_t>(k), 0x9e47})));
  return out;
}

// Original and perturbed statistics under one scoring model; the raw
// material for DetectGPT and NPR, kept so scores can be recomputed.
struct PerturbationLog {
  double original_logprob = 0.0;
  double original_mean_log_rank = 0.0;
  std::vector<double> perturbed_logprob;
  std::vector<double> perturbed_mean_log_rank;
};

inline PerturbationLog score_perturbations(const Passage& p, const std::vector<Passage>& perturbed,
                                           const LanguageModel& scoring) {
  PerturbationLog log;
  const TokenStats base = token_stats(scoring, p.prompt, p.response);
  log.original_logprob = base.total_logprob();
  log.original_mean_log_rank = base.mean_log_rank();
  for (const auto& q : perturbed) {
    const TokenStats st = token_stats_edited(scoring, p.prompt, p.response, base, q.response);
    log.perturbed_logprob.push_back(st.total_logprob());
    log.perturbed_mean_log_rank.push_back(st.mean_log_rank());
  }
  return log;
}

// Offset by the first element so n identical values average to exactly that
// value.
inline double mean_of(std::span<const double> xs) {
  const double x0 = xs.front();
  double d = 0.0;
  for (double x : xs) d += x - x0;
  return x0 + d / static_cast<double>(xs.size());
}

// Sample standard deviation (n - 1 denominator).
inline double sample_std(std::span<const double> xs) {
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

// (l(y) - mean_k l(y_k)) / std_k l(y_k); zero when the perturbed
// log-probabilities have (numerically) zero spread.
inline double detectgpt_from(const PerturbationLog& log, double epsilon) {
  if (log.perturbed_logprob.size() < 2) throw std::invalid_argument("detectgpt: need at least 2 perturbations");
  const double sd = sample_std(log.perturbed_logprob);
  if (!(sd > epsilon)) return 0.0;
  return (log.original_logprob - mean_of(log.perturbed_logprob)) / sd;
}

// mean_k meanlogrank(y_k) / max(meanlogrank(y), eps)
inline double npr_from(const PerturbationLog& log, double epsilon) {
  if (log.perturbed_mean_log_rank.empty()) throw std::invalid_argument("npr: need at least 1 perturbation");
  return mean_of(log.perturbed_mean_log_rank) / std::max(log.original_mean_log_rank, epsilon);
}

inline double detectgpt_score(const Passage& p, const LanguageModel& scoring, const LanguageModel& filler,
                              const DetectorConfig& config, PerturbationLog* log_out = nullptr) {
  require_response(p);
  if (config.n_perturbations < 2) throw std::invalid_argument("detectgpt: n_perturbations must be >= 2");
  PerturbationLog log = score_perturbations(p, perturbation_set(p, filler, config), scoring);
  const double s = detectgpt_from(log, config.epsilon);
  if (log_out) *log_out = std::move(log);
  return s;
}

inline double npr_score(const Passage& p, const LanguageModel& scoring, const LanguageModel& filler,
                        const DetectorConfig& config, PerturbationLog* log_out = nullptr) {
  require_response(p);
  PerturbationLog log = score_perturbations(p, perturbation_set(p, filler, config), scoring);
  const double s = npr_from(log, config.epsilon);
  if (log_out) *log_out = std::move(log);
  return s;
}

// ---- Fast-DetectGPT ---------------------------------------------------------

struct CurvatureMoments {
  double logprob = 0.0;   // l(y) under the scoring model
  double mean = 0.0;      // sum_t E_q[log p]
  double variance = 0.0;  // sum_t Var_q[log p]
};

inline CurvatureMoments curvature_moments(const Passage& p, const LanguageModel& scoring, const LanguageModel& sampling) {
  require_response(p);
  if (scoring.vocab_size() != sampling.vocab_size()) throw std::invalid_argument("fast_detectgpt: vocabulary mismatch");
  CurvatureMoments m;
  TokenSequence ctx = p.prompt;
  const bool same = &scoring == &sampling;
  for (TokenId tok : p.response) {
    const LogDistribution lp = scoring.next_logprobs(ctx);
    const LogDistribution lq = same ? lp : sampling.next_logprobs(ctx);
    double mu = 0.0, sq = 0.0;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      const double q = std::exp(lq[v]);
      if (q == 0.0) continue;
      mu += q * lp[v];
      sq += q * lp[v] * lp[v];
    }
    m.logprob += lp[tok];
    m.mean += mu;
    m.variance += std::max(0.0, sq - mu * mu);
    ctx.push_back(tok);
  }
  return m;
}

inline double fast_detectgpt_from(const CurvatureMoments& m, double epsilon) {
  const double sd = std::sqrt(m.variance);
  if (!(sd > epsilon)) return 0.0;
  return (m.logprob - m.mean) / sd;
}

inline double fast_detectgpt_score(const Passage& p, const LanguageModel& scoring, const LanguageModel& sampling,
                                   const DetectorConfig& config = {}) {
  return fast_detectgpt_from(curvature_moments(p, scoring, sampling), config.epsilon);
}

// ---- DNA-GPT ---------------------------------------------------------------

namespace detail {

inline std::map<TokenSequence, std::size_t> ngram_multiset(TokenSpan seq, std::size_t n) {
  std::map<TokenSequence, std::size_t> out;
  if (seq.size() < n) return out;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++out[TokenSequence(seq.begin() + i, seq.begin() + i + n)];
  return out;
}

}  // namespace detail

// Weighted n-gram overlap between one completion and the true remainder:
// sum_{n=n0..N} n log n * |ngrams_n(c) ∩ ngrams_n(rem)| / max(|c| - n + 1, 1).
inline double dna_overlap(TokenSpan completion, TokenSpan remainder, const DetectorConfig& config) {
  double total = 0.0;
  for (std::size_t n = config.dna_min_ngram; n <= config.dna_max_ngram; ++n) {
    const auto a = detail::ngram_multiset(completion, n);
    const auto b = detail::ngram_multiset(remainder, n);
    std::size_t common = 0;
    for (const auto& [g, c] : a) {
      auto it = b.find(g);
      if (it != b.end()) common += std::min(c, it->second);
    }
    const double denom = std::max<double>(static_cast<double>(completion.size()) - static_cast<double>(n) + 1.0, 1.0);
    const double nn = static_cast<double>(n);
    total += nn * std::log(nn) * static_cast<double>(common) / denom;
  }
  return total;
}

inline double dna_gpt_score(const Passage& p, const LanguageModel& regen, const DetectorConfig& config,
                            std::uint64_t seed, std::vector<TokenSequence>* completions_out = nullptr) {
  require_response(p);
  const std::size_t len = p.response.size();
  const auto keep = static_cast<std::size_t>(std::ceil(config.dna_truncation_ratio * static_cast<double>(len)));
  if (keep < config.dna_min_ngram || len - std::min(keep, len) < config.dna_min_ngram)
    throw DetectorSkip("dna_gpt: response too short for truncation");
  const TokenSpan resp(p.response);
  const TokenSequence ctx = concat(p.prompt, resp.first(keep));
  const TokenSpan remainder = resp.subspan(keep);
  double total = 0.0;
  for (int k = 0; k < config.dna_completions; ++k) {
    const TokenSequence c =
        sample(regen, ctx, remainder.size(), config.dna_temperature, derive_seed(seed, {static_cast<std::uint64_t>(k), 0xD4A}));
    total += dna_overlap(c, remainder, config);
    if (completions_out) completions_out->push_back(c);
  }
  return total / static_cast<double>(config.dna_completions);
}

inline double dna_gpt_score(const Passage& p, const LanguageModel& regen, const DetectorConfig& config) {
  return dna_gpt_score(p, regen, config, passage_seed(config.seed, p));
}

}  // namespace humpa
