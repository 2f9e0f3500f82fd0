#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "humpa/classifier.hpp"
#include "humpa/detectors.hpp"
#include "humpa/metrics.hpp"
#include "humpa/ngram_model.hpp"
#include "humpa/scoring.hpp"

using namespace humpa;

namespace {

// Same distribution at every position.
class FixedLM final : public LanguageModel {
 public:
  explicit FixedLM(std::vector<double> probs) {
    for (double p : probs) lp_.push_back(std::log(p));
  }
  std::size_t vocab_size() const override { return lp_.size(); }
  LogDistribution next_logprobs(TokenSpan) const override { return lp_; }
  std::optional<std::size_t> context_window() const override { return 0; }

 private:
  LogDistribution lp_;
};

// Next token is (last + 1) mod V with probability one.
class CycleLM final : public LanguageModel {
 public:
  explicit CycleLM(std::size_t v) : v_(v) {}
  std::size_t vocab_size() const override { return v_; }
  LogDistribution next_logprobs(TokenSpan ctx) const override {
    LogDistribution lp(v_, -std::numeric_limits<double>::infinity());
    lp[ctx.empty() ? 0 : (ctx.back() + 1) % v_] = 0.0;
    return lp;
  }
  std::optional<std::size_t> context_window() const override { return 1; }

 private:
  std::size_t v_;
};

Passage passage(TokenSequence prompt, TokenSequence response, std::string id = "p") {
  return {std::move(id), std::move(prompt), std::move(response), Provenance::human};
}

TokenSequence cycle(TokenId start, std::size_t n, std::size_t v) {
  TokenSequence out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<TokenId>((start + i) % v));
  return out;
}

NGramModel toy_ngram(int order, std::uint64_t seed, std::size_t v = 5) {
  Rng rng(seed);
  TokenSequence s;
  for (int i = 0; i < 400; ++i) s.push_back(static_cast<TokenId>(rng.below(v - 1) + (rng.coin() ? 1 : 0)));
  return fit_ngram({s}, order, 0.3, v);
}

Passage toy_passage(std::uint64_t seed, std::size_t len = 30, std::size_t v = 5) {
  Rng rng(seed);
  Passage p;
  p.id = "toy" + std::to_string(seed);
  for (int i = 0; i < 4; ++i) p.prompt.push_back(static_cast<TokenId>(rng.below(v)));
  for (std::size_t i = 0; i < len; ++i) p.response.push_back(static_cast<TokenId>(rng.below(v)));
  return p;
}

DetectorConfig small_config() {
  DetectorConfig c;
  c.n_perturbations = 25;
  c.seed = 17;
  return c;
}

}  // namespace

TEST(Likelihood, Examples) {
  EXPECT_EQ(likelihood_score(passage({2}, cycle(3, 6, 5)), CycleLM(5)), 0.0);
  EXPECT_NEAR(likelihood_score(passage({0}, {1, 4, 4, 2}), FixedLM({.2, .2, .2, .2, .2})), -std::log(5.0), 1e-15);
  const auto m = toy_ngram(3, 1);
  const auto p = toy_passage(2);
  TokenSequence ctx = p.prompt;
  double sum = 0;
  for (TokenId t : p.response) {
    sum += m.next_logprobs(ctx)[t];
    ctx.push_back(t);
  }
  EXPECT_NEAR(likelihood_score(p, m), sum / static_cast<double>(p.response.size()), 1e-12);
  EXPECT_THROW(likelihood_score(passage({0}, {}), m), std::invalid_argument);
}

TEST(LogRank, Examples) {
  EXPECT_EQ(logrank_score(passage({2}, cycle(3, 6, 5)), CycleLM(5)), 0.0);
  // Uniform with id tie-break: the last id is ranked V.
  EXPECT_NEAR(logrank_score(passage({0}, {4, 4, 4}), FixedLM({.2, .2, .2, .2, .2})), -std::log(5.0), 1e-15);
  EXPECT_NEAR(logrank_score(passage({0}, {0, 1, 3}), FixedLM({.4, .3, .2, .1})),
              -(0.0 + std::log(2.0) + std::log(4.0)) / 3.0, 1e-15);
}

TEST(Lrr, Examples) {
  // All ranks 1: the denominator is floored at epsilon.
  const double s = lrr_score(passage({0}, {0, 0, 0}), FixedLM({.9, .1}));
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_NEAR(s, -3.0 * std::log(0.9) / 1e-8, 1e-3);
  // Uniform: T log V over the sum of log ranks (rank = id + 1).
  EXPECT_NEAR(lrr_score(passage({0}, {1, 3, 2}), FixedLM({.25, .25, .25, .25})),
              3.0 * std::log(4.0) / (std::log(2.0) + std::log(4.0) + std::log(3.0)), 1e-14);

  const auto m = toy_ngram(3, 3);
  const auto p = toy_passage(4);
  const double n = static_cast<double>(p.response.size());
  EXPECT_NEAR(lrr_score(p, m), (-likelihood_score(p, m) * n) / (-logrank_score(p, m) * n), 1e-12);
}

TEST(Perturb, ZeroMaskLeavesPassageUnchanged) {
  auto c = small_config();
  c.mask_fraction = 0.0;
  const auto m = toy_ngram(2, 5);
  const auto p = toy_passage(6);
  EXPECT_EQ(perturb(p, m, c, 1).response, p.response);
}

TEST(Perturb, SeedDeterminesOutcomeAndSpanCount) {
  const auto c = small_config();
  const auto m = toy_ngram(2, 5);
  const auto p = toy_passage(7, 40);
  EXPECT_EQ(perturb(p, m, c, 9).response, perturb(p, m, c, 9).response);
  // ceil(0.15 * 40 / 2) = 3 spans cover at most 6 positions.
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto q = perturb(p, m, c, s);
    ASSERT_EQ(q.response.size(), p.response.size());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < q.response.size(); ++i) diff += q.response[i] != p.response[i];
    EXPECT_LE(diff, 6u);
    EXPECT_EQ(q.prompt, p.prompt);
  }
  EXPECT_EQ(perturbation_span_count(40, c), 3u);
}

TEST(Perturb, FullMaskUnderDeterministicFillerIsForced) {
  auto c = small_config();
  c.mask_fraction = 0.99;
  const auto q = perturb(passage({2}, {0, 0}), CycleLM(5), c, 3);
  EXPECT_EQ(q.response, (TokenSequence{3, 4}));
  EXPECT_THROW(perturb(passage({2}, {0}), CycleLM(5), c, 3), DetectorSkip);
}

TEST(DetectGpt, ZeroMaskGivesZeroAndNeedsTwoPerturbations) {
  auto c = small_config();
  c.mask_fraction = 0.0;
  const auto m = toy_ngram(3, 8), f = toy_ngram(2, 9);
  const auto p = toy_passage(10);
  EXPECT_EQ(detectgpt_score(p, m, f, c), 0.0);
  c.n_perturbations = 1;
  EXPECT_THROW(detectgpt_score(p, m, f, c), std::invalid_argument);
}

TEST(DetectGpt, MatchesRecomputationFromLogAndIgnoresOrder) {
  auto c = small_config();
  c.n_perturbations = 100;
  const auto m = toy_ngram(3, 8), f = toy_ngram(2, 9);
  const auto p = toy_passage(11);
  PerturbationLog log;
  const double s = detectgpt_score(p, m, f, c, &log);
  ASSERT_EQ(log.perturbed_logprob.size(), 100u);
  EXPECT_EQ(s, detectgpt_score(p, m, f, c));

  // Logged values equal full rescoring of each perturbation.
  const auto pert = perturbation_set(p, f, c);
  for (std::size_t k = 0; k < pert.size(); ++k)
    EXPECT_NEAR(log.perturbed_logprob[k], sequence_logprob(m, p.prompt, pert[k].response), 1e-10);
  double mean = 0, ss = 0;
  for (double x : log.perturbed_logprob) mean += x / 100.0;
  for (double x : log.perturbed_logprob) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(s, (sequence_logprob(m, p.prompt, p.response) - mean) / std::sqrt(ss / 99.0), 1e-9);

  auto rev = log;
  std::reverse(rev.perturbed_logprob.begin(), rev.perturbed_logprob.end());
  EXPECT_NEAR(detectgpt_from(rev, c.epsilon), s, 1e-12);
}

TEST(Npr, Examples) {
  auto c = small_config();
  c.mask_fraction = 0.0;
  const auto m = toy_ngram(3, 12), f = toy_ngram(2, 13);
  const auto p = toy_passage(14);
  EXPECT_EQ(npr_score(p, m, f, c), 1.0);

  // Original all rank 1 under the cycle model; perturbations break the cycle.
  auto c2 = small_config();
  const double s = npr_score(passage({2}, cycle(3, 20, 5)), CycleLM(5), toy_ngram(1, 15), c2);
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_GT(s, 1e6);
}

TEST(Npr, MatchesRecomputationFromLogAndIgnoresOrder) {
  const auto c = small_config();
  const auto m = toy_ngram(3, 12), f = toy_ngram(2, 13);
  const auto p = toy_passage(16);
  PerturbationLog log;
  const double s = npr_score(p, m, f, c, &log);
  const auto pert = perturbation_set(p, f, c);
  double mean = 0;
  for (std::size_t k = 0; k < pert.size(); ++k) {
    const auto st = token_stats(m, p.prompt, pert[k].response);
    EXPECT_NEAR(log.perturbed_mean_log_rank[k], st.mean_log_rank(), 1e-12);
    mean += st.mean_log_rank() / static_cast<double>(pert.size());
  }
  EXPECT_NEAR(s, mean / token_stats(m, p.prompt, p.response).mean_log_rank(), 1e-12);
  auto rev = log;
  std::reverse(rev.perturbed_mean_log_rank.begin(), rev.perturbed_mean_log_rank.end());
  EXPECT_NEAR(npr_from(rev, c.epsilon), s, 1e-12);
}

TEST(FastDetectGpt, GuardsAndCentering) {
  // Deterministic scoring model: zero variance.
  const CycleLM cyc(5);
  EXPECT_EQ(fast_detectgpt_score(passage({2}, cycle(3, 8, 5)), cyc, cyc), 0.0);
  // Uniform scoring: every token's log-probability equals its expectation.
  const FixedLM uni({.25, .25, .25, .25});
  EXPECT_EQ(fast_detectgpt_score(passage({0}, {1, 2, 3}), uni, FixedLM({.1, .2, .3, .4})), 0.0);
  EXPECT_THROW(fast_detectgpt_score(passage({0}, {1}), uni, FixedLM({.5, .5})), std::invalid_argument);
}

TEST(FastDetectGpt, HandMomentsOnFixedModels) {
  const FixedLM p({.5, .25, .25}), q({.2, .3, .5});
  const auto m = curvature_moments(passage({0}, {0, 1}), p, q);
  const double l[3] = {std::log(.5), std::log(.25), std::log(.25)};
  const double mu = .2 * l[0] + .8 * l[1];
  const double var = .2 * l[0] * l[0] + .8 * l[1] * l[1] - mu * mu;
  EXPECT_NEAR(m.logprob, l[0] + l[1], 1e-15);
  EXPECT_NEAR(m.mean, 2 * mu, 1e-14);
  EXPECT_NEAR(m.variance, 2 * var, 1e-14);
  EXPECT_NEAR(fast_detectgpt_score(passage({0}, {0, 1}), p, q), (l[0] + l[1] - 2 * mu) / std::sqrt(2 * var), 1e-12);
}

TEST(FastDetectGpt, AnalyticMeanMatchesMonteCarlo) {
  const auto scoring = toy_ngram(3, 20), sampling = toy_ngram(2, 21);
  Rng rng(22);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = toy_passage(100 + s, 20);
    const auto m = curvature_moments(p, scoring, sampling);
    // Token-wise resampling: each position drawn from the sampling model
    // given the original prefix.
    const int n = 10000;
    double sum = 0, sq = 0;
    std::vector<LogDistribution> lp, lq;
    TokenSequence ctx = p.prompt;
    for (TokenId t : p.response) {
      lp.push_back(scoring.next_logprobs(ctx));
      lq.push_back(sampling.next_logprobs(ctx));
      ctx.push_back(t);
    }
    for (int i = 0; i < n; ++i) {
      double l = 0;
      for (std::size_t t = 0; t < lp.size(); ++t) l += lp[t][sample_token(lq[t], 1.0, rng)];
      sum += l;
      sq += l * l;
    }
    const double mc = sum / n;
    const double se = std::sqrt((sq / n - mc * mc) / n);
    EXPECT_LT(std::abs(mc - m.mean), 3 * se) << s;
    EXPECT_NEAR(sq / n - mc * mc, m.variance, 0.1 * m.variance) << s;
  }
}

TEST(DnaGpt, OverlapExamples) {
  DetectorConfig c;
  const TokenSequence rem{1, 2, 3, 1, 2};
  EXPECT_EQ(dna_overlap(TokenSequence{4, 4, 4, 4, 4}, rem, c), 0.0);
  // Hand count. c1 = 1 2 3 4 5 shares the 3-gram "1 2 3"; c2 = 3 1 2 3 1
  // shares all three 3-grams and the 4-gram "1 2 3 1".
  const double c1 = 3 * std::log(3.0) * 1 / 3;
  const double c2 = 3 * std::log(3.0) * 3 / 3 + 4 * std::log(4.0) * 1 / 2;
  EXPECT_NEAR(dna_overlap(TokenSequence{1, 2, 3, 4, 5}, rem, c), c1, 1e-15);
  EXPECT_NEAR(dna_overlap(TokenSequence{3, 1, 2, 3, 1}, rem, c), c2, 1e-15);
  EXPECT_NEAR((c1 + c2) / 2, 2 * std::log(3.0) + std::log(4.0), 1e-14);
  // Min-count clipping: "1 1 1" appears twice in the completion, once in
  // the remainder.
  EXPECT_NEAR(dna_overlap(TokenSequence{1, 1, 1, 1}, TokenSequence{1, 1, 1, 2}, c), 3 * std::log(3.0) / 2, 1e-15);
}

TEST(DnaGpt, FullOverlapIsTheMaximum) {
  DetectorConfig c;
  c.dna_completions = 3;
  double max = 0;
  for (std::size_t n = 3; n <= 8; ++n) max += static_cast<double>(n) * std::log(static_cast<double>(n));
  EXPECT_NEAR(dna_gpt_score(passage({2}, cycle(3, 20, 5)), CycleLM(5), c, 1), max, 1e-12);
}

TEST(DnaGpt, ScoreIsMeanOverLoggedCompletions) {
  DetectorConfig c;
  const auto m = toy_ngram(3, 30);
  const auto p = toy_passage(31, 25);
  std::vector<TokenSequence> comps;
  const double s = dna_gpt_score(p, m, c, 77, &comps);
  ASSERT_EQ(comps.size(), 10u);
  const TokenSequence rem(p.response.begin() + 5, p.response.end());
  double total = 0;
  for (const auto& comp : comps) {
    EXPECT_EQ(comp.size(), rem.size());
    total += dna_overlap(comp, rem, c);
  }
  EXPECT_NEAR(s, total / 10, 1e-12);
  EXPECT_EQ(s, dna_gpt_score(p, m, c, 77));
  EXPECT_THROW(dna_gpt_score(toy_passage(32, 6), m, c, 1), DetectorSkip);
}

TEST(Classifier, ZeroWeightsGiveHalf) {
  ClassifierDetector d;
  EXPECT_EQ(d.score(TokenSequence{1, 2}), 0.5);
  d.weights.assign(d.buckets, 0.0);
  EXPECT_EQ(classifier_score(d, passage({0}, {3, 1, 2})), 0.5);
}

TEST(Classifier, SeparableClassesAndSingleClassError) {
  std::vector<Passage> data;
  Rng rng(40);
  for (int i = 0; i < 40; ++i) {
    Passage p = passage({0}, {}, "c" + std::to_string(i));
    const bool machine = i % 2 == 1;
    for (int t = 0; t < 12; ++t) p.response.push_back(static_cast<TokenId>(machine ? 3 + rng.below(3) : rng.below(3)));
    p.provenance = machine ? Provenance::machine_ref : Provenance::human;
    data.push_back(p);
  }
  const auto d = train_classifier(data);
  for (const auto& p : data) EXPECT_EQ(d.score(p.response) > 0.5, p.provenance != Provenance::human);
  std::vector<Passage> one(data.begin(), data.begin() + 1);
  EXPECT_THROW(train_classifier(one), std::invalid_argument);
}

TEST(Classifier, HeldOutAurocAboveChance) {
  const auto human_lm = toy_ngram(2, 50, 8), machine_lm = toy_ngram(3, 51, 8);
  auto make = [&](std::size_t n, std::uint64_t seed) {
    std::vector<Passage> out;
    for (std::size_t i = 0; i < n; ++i) {
      const bool machine = i % 2 == 1;
      Passage p = passage({0, 1}, {}, std::to_string(seed) + ":" + std::to_string(i));
      p.response = sample(machine ? machine_lm : human_lm, p.prompt, 30, 1.0, derive_seed(seed, {i}));
      p.provenance = machine ? Provenance::machine_ref : Provenance::human;
      out.push_back(std::move(p));
    }
    return out;
  };
  const auto d = train_classifier(make(200, 1));
  ScoreSample s;
  for (const auto& p : make(200, 2)) (p.provenance == Provenance::human ? s.negatives : s.positives).push_back(d.score(p.response));
  const double a = auroc(s);
  RecordProperty("heldout_auroc", std::to_string(a));
  EXPECT_GT(a, 0.5);
}

TEST(Scoring, SuiteMatchesStandaloneDetectors) {
  const auto scoring = toy_ngram(3, 60), sampling = toy_ngram(2, 61), filler = toy_ngram(2, 62);
  const auto c = small_config();
  ClassifierDetector cls;
  const Wiring w{"w", &scoring, &sampling, &scoring, &cls};
  const std::vector<DetectorKind> all(kAllDetectors.begin(), kAllDetectors.end());
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto p = toy_passage(200 + s, 25);
    const auto row = score_passage(p, {w}, filler, c, all)[0];
    EXPECT_NEAR(*row[0], likelihood_score(p, scoring), 1e-12);
    EXPECT_NEAR(*row[1], logrank_score(p, scoring), 1e-12);
    EXPECT_NEAR(*row[2], lrr_score(p, scoring, c), 1e-12);
    EXPECT_NEAR(*row[3], detectgpt_score(p, scoring, filler, c), 1e-9);
    EXPECT_NEAR(*row[4], npr_score(p, scoring, filler, c), 1e-12);
    EXPECT_NEAR(*row[5], fast_detectgpt_score(p, scoring, sampling, c), 1e-12);
    EXPECT_EQ(*row[6], dna_gpt_score(p, scoring, c));
    EXPECT_EQ(*row[7], 0.5);
    // Bit-identical on repeat.
    const auto again = score_passage(p, {w}, filler, c, all)[0];
    EXPECT_EQ(row, again);
  }
}

TEST(Scoring, ShortPassagesAreSkippedNotFatal) {
  const auto scoring = toy_ngram(3, 60);
  const Wiring w{"w", &scoring, &scoring, &scoring, nullptr};
  const auto row = score_passage(passage({0}, {1, 2}), {w}, scoring, small_config(),
                                 {DetectorKind::likelihood, DetectorKind::dna_gpt, DetectorKind::classifier})[0];
  EXPECT_TRUE(row[0].has_value());
  EXPECT_FALSE(row[1].has_value());
  EXPECT_FALSE(row[2].has_value());
  EXPECT_EQ(detector_from_string("fast_detectgpt"), DetectorKind::fast_detectgpt);
  EXPECT_THROW(detector_from_string("gptzero"), std::invalid_argument);
}
