#include <cmath>
#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "humpa/dpo.hpp"
#include "humpa/enumerable_policy.hpp"
#include "humpa/ngram_model.hpp"
#include "humpa/preference.hpp"

using namespace humpa;

namespace {

std::shared_ptr<NGramModel> toy_base(std::uint64_t seed, std::size_t V = 4, int order = 2) {
  Rng rng(seed);
  TokenSequence s;
  for (int i = 0; i < 400; ++i) s.push_back(static_cast<TokenId>(rng.below(V)));
  return std::make_shared<NGramModel>(fit_ngram({s}, order, 0.3, V));
}

TokenSequence random_seq(Rng& rng, std::size_t V, std::size_t len) {
  TokenSequence s;
  for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.below(V)));
  return s;
}

std::vector<PreferencePair> random_pairs(std::uint64_t seed, std::size_t V, std::size_t n) {
  Rng rng(seed);
  std::vector<PreferencePair> out;
  while (out.size() < n) {
    PreferencePair p{random_seq(rng, V, 2), random_seq(rng, V, 1 + rng.below(4)), random_seq(rng, V, 1 + rng.below(4))};
    if (p.preferred != p.dispreferred) out.push_back(std::move(p));
  }
  return out;
}

std::shared_ptr<EnumerablePolicy> one_step(double p0) {
  auto p = std::make_shared<EnumerablePolicy>(2, 1);
  p->set_conditional({}, {std::log(p0), std::log(1.0 - p0)});
  return p;
}

}  // namespace

TEST(BradleyTerry, Values) {
  EXPECT_DOUBLE_EQ(bt_probability(1.3, 1.3), 0.5);
  EXPECT_NEAR(bt_probability(std::log(3.0), 0.0), 0.75, 1e-15);
  EXPECT_NEAR(bt_probability(1e6 * 0.01, 0.0), 1.0, 1e-9);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(log_sigmoid(-800.0), -800.0, 1e-9);
  EXPECT_NEAR(log_sigmoid(0.0), -std::log(2.0), 1e-15);
}

TEST(BradleyTerry, EmpiricalLabelRateWithinThreeSigma) {
  const double s1 = 0.3, s2 = -0.2, C = 2.0;
  const double p = bt_probability(C * s1, C * s2);
  Rng rng(17);
  const int n = 10000;
  int first = 0;
  for (int i = 0; i < n; ++i) first += prefer_first(s1, s2, Labeling::bt(C), rng) ? 1 : 0;
  EXPECT_LT(std::abs(first - n * p), 3.0 * std::sqrt(n * p * (1 - p)));
}

TEST(BradleyTerry, LargeScaleAgreesWithHardLabels) {
  Rng scores(5), coin(6);
  int agree = 0, n = 0;
  while (n < 10000) {
    const double s1 = scores.uniform(), s2 = scores.uniform();
    if (s1 == s2) continue;
    ++n;
    agree += prefer_first(s1, s2, Labeling::bt(1e6), coin) == prefer_first(s1, s2, Labeling::hard(), coin) ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(agree) / n, 0.999);
}

TEST(BuildPreferences, HardLabelsFollowScores) {
  Rng rng(1);
  EXPECT_TRUE(prefer_first(0.9, 0.1, Labeling::hard(), rng));
  EXPECT_FALSE(prefer_first(0.1, 0.9, Labeling::hard(), rng));

  auto base = toy_base(3);
  std::vector<TokenSequence> prompts{{0}, {1, 2}, {3}, {2, 2}};
  // Human-ness: number of zeros.
  RewardFunction score = [](TokenSpan, TokenSpan y) { return static_cast<double>(std::count(y.begin(), y.end(), 0)); };
  PreferenceBuildStats stats;
  const auto pairs = build_preferences(*base, prompts, score, 3, Labeling::hard(), {6, 1.0, 9}, 1, &stats);
  EXPECT_EQ(stats.pairs + stats.skipped_degenerate, 12u);
  for (const auto& p : pairs) {
    EXPECT_NE(p.preferred, p.dispreferred);
    EXPECT_GE(score(p.prompt, p.preferred), score(p.prompt, p.dispreferred));
  }
}

TEST(BuildPreferences, TiesAreSeededAndJobCountDoesNotMatter) {
  auto base = toy_base(4);
  std::vector<TokenSequence> prompts;
  for (TokenId i = 0; i < 20; ++i) prompts.push_back({static_cast<TokenId>(i % 4)});
  RewardFunction flat = [](TokenSpan, TokenSpan) { return 0.0; };
  PreferenceBuildStats stats;
  const auto a = build_preferences(*base, prompts, flat, 2, Labeling::hard(), {5, 1.0, 11}, 1, &stats);
  const auto b = build_preferences(*base, prompts, flat, 2, Labeling::hard(), {5, 1.0, 11}, 4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(stats.ties, stats.pairs);
  const auto c = build_preferences(*base, prompts, flat, 2, Labeling::hard(), {5, 1.0, 12}, 1);
  EXPECT_NE(a, c);
}

TEST(BuildPreferences, DegenerateGenerationIsSkipped) {
  // A model that always emits token 0 can never produce a distinct pair.
  auto p = std::make_shared<EnumerablePolicy>(2, 3);
  for (const auto& prefix : {TokenSequence{0}, TokenSequence{0, 0}, TokenSequence{0, 0, 0}})
    p->set_conditional(prefix, {0.0, -std::numeric_limits<double>::infinity()});
  RewardFunction flat = [](TokenSpan, TokenSpan) { return 0.0; };
  PreferenceBuildStats stats;
  const auto pairs = build_preferences(*p, {{0}}, flat, 2, Labeling::hard(), {2, 1.0, 0}, 1, &stats);
  EXPECT_TRUE(pairs.empty());
  EXPECT_EQ(stats.skipped_degenerate, 2u);
  EXPECT_THROW(build_preferences(*p, {{0}}, flat, 0, Labeling::hard(), {2, 1.0, 0}), std::invalid_argument);
}

TEST(BuildPreferences, JsonlRoundTrip) {
  const auto pairs = random_pairs(8, 5, 30);
  const auto path = std::filesystem::temp_directory_path() / "humpa_prefs_test.jsonl";
  write_preferences_jsonl(path.string(), pairs);
  EXPECT_EQ(read_preferences_jsonl(path.string()), pairs);
  std::filesystem::remove(path);
}

TEST(DpoLoss, EqualModelsGiveLn2) {
  auto base = toy_base(2);
  const auto pairs = random_pairs(3, 4, 25);
  EXPECT_NEAR(dpo_loss(*base, *base, pairs, 0.2), std::log(2.0), 1e-15);
}

TEST(DpoLoss, VanishingBetaApproachesLn2) {
  auto a = toy_base(2), b = toy_base(9);
  const auto pairs = random_pairs(3, 4, 25);
  for (double beta : {1e-3, 1e-5}) EXPECT_LT(std::abs(dpo_loss(*a, *b, pairs, beta) - std::log(2.0)), 50 * beta);
}

TEST(DpoLoss, HandComputedV2) {
  // margin = ln(.7/.5) - ln(.3/.5) = ln(7/3); loss = -ln sigma(ln 7/3) = ln(10/7).
  auto model = one_step(0.7), ref = one_step(0.5);
  std::vector<PreferencePair> pairs{{{}, {0}, {1}}};
  EXPECT_NEAR(dpo_loss(*model, *ref, pairs, 1.0), std::log(10.0 / 7.0), 1e-14);
  // beta = 2: -ln sigma(2 ln 7/3) = ln(1 + 9/49).
  EXPECT_NEAR(dpo_loss(*model, *ref, pairs, 2.0), std::log(58.0 / 49.0), 1e-14);
  EXPECT_THROW(dpo_loss(*model, *ref, pairs, 0.0), std::invalid_argument);
}

TEST(DpoGradient, MatchesFiniteDifferences) {
  Rng rng(44);
  for (int trial = 0; trial < 5; ++trial) {
    auto base = toy_base(100 + trial, 4, 3);
    HashedLogLinearLM model(base, 32, trial % 2 == 0);
    for (double& w : model.mutable_weights()) w = 0.5 * (2 * rng.uniform() - 1);
    if (model.has_context_feature()) model.set_context_weight(0.4 * rng.uniform() - 0.2);
    const auto pairs = random_pairs(200 + trial, 4, 6);
    const double beta = 0.5;
    SparseGradient grad(model.parameter_count());
    const double loss = dpo_loss_and_gradient(model, *base, pairs, beta, grad);
    EXPECT_NEAR(loss, dpo_loss(model, *base, pairs, beta), 1e-13);
    const double h = 1e-5;
    for (std::size_t j = 0; j < model.parameter_count(); ++j) {
      HashedLogLinearLM plus = model, minus = model;
      plus.add_to_parameter(j, h);
      minus.add_to_parameter(j, -h);
      const double fd = (dpo_loss(plus, *base, pairs, beta) - dpo_loss(minus, *base, pairs, beta)) / (2 * h);
      EXPECT_NEAR(grad[j], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "bucket " << j;
    }
  }
}

TEST(DpoTrain, ZeroLearningRateLeavesModelUnchanged) {
  auto base = toy_base(5);
  HashedLogLinearLM model(base, 64);
  const auto pairs = random_pairs(6, 4, 20);
  DpoConfig cfg;
  cfg.learning_rate = 0.0;
  const auto result = dpo_train(model, *base, pairs, cfg);
  EXPECT_EQ(result.model.weights(), model.weights());
  ASSERT_EQ(result.epoch_losses.size(), 5u);
  for (double l : result.epoch_losses) EXPECT_NEAR(l, std::log(2.0), 1e-15);
}

TEST(DpoTrain, SinglePairLossDropsAfterFirstEpoch) {
  auto base = toy_base(7);
  HashedLogLinearLM model(base, 64);
  std::vector<PreferencePair> pairs{{{1}, {0, 0, 2}, {3, 1, 1}}};
  DpoConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 20;
  const auto result = dpo_train(model, *base, pairs, cfg);
  EXPECT_LT(result.epoch_losses.front(), std::log(2.0));
  EXPECT_LT(result.epoch_losses.back(), result.epoch_losses.front());
}

TEST(DpoTrain, SmallLearningRateGivesNonIncreasingTrace) {
  auto base = toy_base(8, 5, 3);
  HashedLogLinearLM model(base, 128);
  const auto pairs = random_pairs(9, 5, 40);
  DpoConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 10;
  const auto result = dpo_train(model, *base, pairs, cfg);
  for (std::size_t i = 1; i < result.epoch_losses.size(); ++i)
    EXPECT_LE(result.epoch_losses[i], result.epoch_losses[i - 1] + 1e-15);
}

TEST(DpoTrain, ClippedStepHasTheClipLength) {
  auto base = toy_base(12, 4, 2);
  const auto pairs = random_pairs(13, 4, 8);
  HashedLogLinearLM model(base, 64, true);
  DpoConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = pairs.size();
  cfg.learning_rate = 0.5;
  cfg.max_grad_norm = 1e-3;
  SparseGradient g(model.parameter_count());
  dpo_loss_and_gradient(model, *base, pairs, cfg.beta, g);
  double raw = 0.0;
  for (std::size_t j : g.touched()) raw += g[j] * g[j];
  ASSERT_GT(std::sqrt(raw), cfg.max_grad_norm);
  const auto out = dpo_train(model, *base, pairs, cfg).model;
  double moved = 0.0;
  for (std::size_t j = 0; j < model.parameter_count(); ++j) moved += std::pow(out.parameter(j) - model.parameter(j), 2);
  EXPECT_NEAR(std::sqrt(moved), cfg.learning_rate * cfg.max_grad_norm, 1e-15);
  cfg.max_grad_norm = -1.0;
  EXPECT_THROW(dpo_train(model, *base, pairs, cfg), std::invalid_argument);
}

TEST(DpoTrain, DeterministicGivenSeedAndRejectsEmptyData) {
  auto base = toy_base(10);
  HashedLogLinearLM model(base, 64);
  const auto pairs = random_pairs(11, 4, 30);
  DpoConfig cfg;
  cfg.batch_size = 4;
  const auto a = dpo_train(model, *base, pairs, cfg), b = dpo_train(model, *base, pairs, cfg);
  EXPECT_EQ(a.model.weights(), b.model.weights());
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_THROW(dpo_train(model, *base, std::vector<PreferencePair>{}, cfg), std::invalid_argument);
  cfg.beta = 0.0;
  EXPECT_THROW(dpo_train(model, *base, pairs, cfg), std::invalid_argument);
}

TEST(ClosedFormDpo, IndicatorRewardV2T2) {
  // pi_ref: first token 0 w.p. .6; second token depends on the first.
  EnumerablePolicy ref(2, 2);
  ref.set_conditional({}, {std::log(0.6), std::log(0.4)});
  ref.set_conditional({0}, {std::log(0.3), std::log(0.7)});
  ref.set_conditional({1}, {std::log(0.8), std::log(0.2)});
  RewardFunction r = [](TokenSpan, TokenSpan y) { return y.size() == 2 && y[0] == 1 && y[1] == 1 ? 1.0 : 0.0; };
  const auto dist = closed_form_dpo(ref, r, 1.0, {});
  // Outcomes in lexicographic order 00, 01, 10, 11 with ref mass .18 .42 .32 .08.
  const double e = std::exp(1.0), z = 0.18 + 0.42 + 0.32 + 0.08 * e;
  const std::vector<double> expected{0.18 / z, 0.42 / z, 0.32 / z, 0.08 * e / z};
  ASSERT_EQ(dist.outcomes.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(dist.outcomes[i], (TokenSequence{static_cast<TokenId>(i / 2), static_cast<TokenId>(i % 2)}));
    EXPECT_NEAR(dist.probs[i], expected[i], 1e-15);
  }
}

TEST(ClosedFormDpo, ConstantRewardUniformRefAndShift) {
  const TokenSequence x{2};
  auto ref = EnumerablePolicy::random(3, 3, {x}, 77);
  const auto ref_dist = exact_seq_distribution(ref, x);
  RewardFunction constant = [](TokenSpan, TokenSpan) { return 4.2; };
  const auto same = closed_form_dpo(ref, constant, 0.3, x);
  for (std::size_t i = 0; i < same.probs.size(); ++i) EXPECT_NEAR(same.probs[i], ref_dist.probs[i], 1e-14);

  RewardFunction r = [](TokenSpan, TokenSpan y) {
    double s = 0;
    for (std::size_t t = 0; t < y.size(); ++t) s += (t + 1) * std::sin(1.0 + y[t]);
    return s;
  };
  const double beta = 0.7;
  const auto uni = closed_form_dpo(EnumerablePolicy::uniform(3, 3), r, beta, x);
  std::vector<double> logits;
  for (const auto& y : uni.outcomes) logits.push_back(r(x, y) / beta);
  const double lz = log_sum_exp(logits);
  for (std::size_t i = 0; i < uni.probs.size(); ++i) EXPECT_NEAR(uni.probs[i], std::exp(logits[i] - lz), 1e-14);

  RewardFunction shifted = [&](TokenSpan p, TokenSpan y) { return r(p, y) - 12.5; };
  const auto a = closed_form_dpo(ref, r, beta, x), b = closed_form_dpo(ref, shifted, beta, x);
  EXPECT_NEAR(a.total(), 1.0, 1e-9);
  for (std::size_t i = 0; i < a.probs.size(); ++i) EXPECT_NEAR(a.probs[i], b.probs[i], 1e-12);
}
