#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "humpa/enumerable_policy.hpp"
#include "humpa/loglinear_model.hpp"
#include "humpa/preference.hpp"

namespace humpa {

struct DpoConfig {
  double beta = 0.2;
  int epochs = 5;
  double learning_rate = 0.1;
  std::size_t batch_size = 16;
  // Mini-batch gradients longer than this (L2) are rescaled to it; 0 turns
  // clipping off.
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("DpoConfig: beta must be positive");
    if (epochs < 1) throw std::invalid_argument("DpoConfig: epochs must be positive");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("DpoConfig: learning_rate must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("DpoConfig: batch_size must be positive");
    if (!(max_grad_norm >= 0.0)) throw std::invalid_argument("DpoConfig: max_grad_norm must be non-negative");
  }
};

struct DpoResult {
  HashedLogLinearLM model;
  std::vector<double> epoch_losses;  // full-dataset loss after each epoch
};

// Per-pair DPO loss: -log sigma(beta * [(log pi(yw) - log ref(yw)) - (log pi(yl) - log ref(yl))]).
inline double dpo_pair_loss(double policy_w, double ref_w, double policy_l, double ref_l, double beta) {
  return -log_sigmoid(beta * ((policy_w - ref_w) - (policy_l - ref_l)));
}

inline double dpo_loss(const LanguageModel& model, const LanguageModel& ref_model,
                       std::span<const PreferencePair> dataset, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be positive");
  if (model.vocab_size() != ref_model.vocab_size()) throw std::invalid_argument("dpo_loss: vocabulary mismatch");
  if (dataset.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : dataset) {
    total += dpo_pair_loss(sequence_logprob(model, p.prompt, p.preferred), sequence_logprob(ref_model, p.prompt, p.preferred),
                           sequence_logprob(model, p.prompt, p.dispreferred),
                           sequence_logprob(ref_model, p.prompt, p.dispreferred), beta);
  }
  return total / static_cast<double>(dataset.size());
}

// Reference log-probabilities (preferred, dispreferred) per pair; constant
// during training.
inline std::vector<std::pair<double, double>> reference_logprobs(const LanguageModel& ref_model,
                                                                 std::span<const PreferencePair> dataset) {
  std::vector<std::pair<double, double>> out;
  out.reserve(dataset.size());
  for (const auto& p : dataset)
    out.emplace_back(sequence_logprob(ref_model, p.prompt, p.preferred),
                     sequence_logprob(ref_model, p.prompt, p.dispreferred));
  return out;
}

// Mean loss over `indices` and its gradient with respect to the model
// weights, accumulated into `grad` (which the caller clears).
inline double dpo_loss_and_gradient(const HashedLogLinearLM& model, std::span<const PreferencePair> dataset,
                                    std::span<const std::pair<double, double>> ref_lp,
                                    std::span<const std::size_t> indices, double beta, SparseGradient& grad) {
  if (indices.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(indices.size());
  double total = 0.0;
  for (std::size_t i : indices) {
    const auto& p = dataset[i];
    const double lw = sequence_logprob(model, p.prompt, p.preferred);
    const double ll = sequence_logprob(model, p.prompt, p.dispreferred);
    const double margin = beta * ((lw - ref_lp[i].first) - (ll - ref_lp[i].second));
    total += -log_sigmoid(margin);
    // d/dmargin of -log sigma(margin) = -sigma(-margin)
    const double coef = -beta * sigmoid(-margin) * inv_n;
    model.accumulate_sequence_gradient(p.prompt, p.preferred, coef, grad);
    model.accumulate_sequence_gradient(p.prompt, p.dispreferred, -coef, grad);
  }
  return total * inv_n;
}

inline double dpo_loss_and_gradient(const HashedLogLinearLM& model, const LanguageModel& ref_model,
                                    std::span<const PreferencePair> dataset, double beta, SparseGradient& grad) {
  const auto ref_lp = reference_logprobs(ref_model, dataset);
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return dpo_loss_and_gradient(model, dataset, ref_lp, idx, beta, grad);
}

// Mini-batch gradient descent on the DPO loss. The model should start with
// zero weights so it coincides with its base, which is normally `ref_model`.
inline DpoResult dpo_train(HashedLogLinearLM model, const LanguageModel& ref_model,
                           std::span<const PreferencePair> dataset, const DpoConfig& config) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("dpo_train: empty dataset");
  if (model.vocab_size() != ref_model.vocab_size()) throw std::invalid_argument("dpo_train: vocabulary mismatch");

  const auto ref_lp = reference_logprobs(ref_model, dataset);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SparseGradient grad(model.parameter_count());
  Rng rng(config.seed);
  std::vector<double> trace;

  auto full_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto& p = dataset[i];
      total += dpo_pair_loss(sequence_logprob(model, p.prompt, p.preferred), ref_lp[i].first,
                             sequence_logprob(model, p.prompt, p.dispreferred), ref_lp[i].second, config.beta);
    }
    return total / static_cast<double>(dataset.size());
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      grad.clear();
      const double loss = dpo_loss_and_gradient(model, dataset, ref_lp,
                                                std::span<const std::size_t>(order).subspan(start, end - start),
                                                config.beta, grad);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "dpo_train: non-finite loss at epoch " << epoch + 1 << ", batch starting at " << start;
        throw std::runtime_error(msg.str());
      }
      if (config.learning_rate == 0.0) continue;
      double step = config.learning_rate;
      if (config.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (std::size_t j : grad.touched()) sq += grad[j] * grad[j];
        if (std::sqrt(sq) > config.max_grad_norm) step *= config.max_grad_norm / std::sqrt(sq);
      }
      for (std::size_t j : grad.touched()) model.add_to_parameter(j, -step * grad[j]);
    }
    const double epoch_loss = full_loss();
    if (!std::isfinite(epoch_loss))
      throw std::runtime_error("dpo_train: non-finite loss after epoch " + std::to_string(epoch + 1));
    trace.push_back(epoch_loss);
  }
  return {std::move(model), std::move(trace)};
}

inline void write_loss_trace_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "epoch,loss\n";
  os.precision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
}

// Optimum of the KL-regularized reward objective (and of the DPO loss under
// Bradley-Terry data) on an enumerable space:
//   pi*(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x).
inline SequenceDistribution closed_form_dpo(const EnumerablePolicy& ref_policy, const RewardFunction& reward,
                                            double beta, TokenSpan prompt) {
  if (!(beta > 0.0)) throw std::invalid_argument("closed_form_dpo: beta must be positive");
  SequenceDistribution ref = exact_seq_distribution(ref_policy, prompt);
  std::vector<double> r(ref.outcomes.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = reward(prompt, ref.outcomes[i]);
  // Rewards enter relative to their maximum: at small beta, r / beta is huge
  // and its rounding error would otherwise swamp the probabilities.
  const double r_max = r.empty() ? 0.0 : *std::max_element(r.begin(), r.end());
  std::vector<double> logits(r.size());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::log(ref.probs[i]) + (r[i] - r_max) / beta;
  const double z = log_sum_exp(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) ref.probs[i] = std::exp(logits[i] - z);
  return ref;
}

}  // namespace humpa
