#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "humpa/detectors.hpp"
#include "humpa/preference.hpp"

namespace humpa {

struct ClassifierConfig {
  std::size_t buckets = 4096;
  std::size_t max_order = 3;
  int epochs = 300;
  double learning_rate = 2.0;
  double l2 = 1e-4;
};

// Logistic regression over hashed token n-gram frequencies (orders
// 1..max_order); stands in for a fine-tuned transformer classifier.
// Output is P(machine).
struct ClassifierDetector {
  std::size_t buckets = 4096;
  std::size_t max_order = 3;
  std::vector<double> weights;
  double bias = 0.0;

  using Features = std::vector<std::pair<std::size_t, double>>;

  // Sparse feature vector: each n-gram contributes 1 / (number of n-grams of
  // its order) to its bucket.
  Features features(TokenSpan response) const {
    Features out;
    std::vector<std::pair<std::size_t, double>> raw;
    for (std::size_t n = 1; n <= max_order; ++n) {
      if (response.size() < n) break;
      const double w = 1.0 / static_cast<double>(response.size() - n + 1);
      for (std::size_t i = 0; i + n <= response.size(); ++i) {
        std::uint64_t h = 0xcbf29ce484222325ULL ^ n;
        for (std::size_t j = 0; j < n; ++j) {
          h ^= response[i + j];
          h *= 0x100000001b3ULL;
          h ^= h >> 29;
        }
        raw.emplace_back(static_cast<std::size_t>(h % buckets), w);
      }
    }
    std::sort(raw.begin(), raw.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [b, w] : raw) {
      if (!out.empty() && out.back().first == b)
        out.back().second += w;
      else
        out.emplace_back(b, w);
    }
    return out;
  }

  double logit(const Features& f) const {
    double z = bias;
    for (const auto& [b, x] : f) z += weights[b] * x;
    return z;
  }

  double score(TokenSpan response) const {
    if (weights.empty()) return 0.5;
    return sigmoid(logit(features(response)));
  }
};

inline double classifier_score(const ClassifierDetector& detector, const Passage& p) {
  require_response(p);
  return detector.score(p.response);
}

// Full-batch gradient descent on the L2-regularized mean log loss; machine
// passages are the positive class. Deterministic.
inline ClassifierDetector train_classifier(const std::vector<Passage>& passages, const ClassifierConfig& config = {}) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& p : passages) (p.provenance == Provenance::human ? n_neg : n_pos) += 1;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("train_classifier: both classes are required");

  ClassifierDetector det;
  det.buckets = config.buckets;
  det.max_order = config.max_order;
  det.weights.assign(config.buckets, 0.0);
  std::vector<ClassifierDetector::Features> feats;
  std::vector<double> labels;
  feats.reserve(passages.size());
  for (const auto& p : passages) {
    feats.push_back(det.features(p.response));
    labels.push_back(p.provenance == Provenance::human ? 0.0 : 1.0);
  }
  const double inv_n = 1.0 / static_cast<double>(passages.size());
  std::vector<double> grad(config.buckets);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gbias = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const double err = sigmoid(det.logit(feats[i])) - labels[i];
      gbias += err * inv_n;
      for (const auto& [b, x] : feats[i]) grad[b] += err * x * inv_n;
    }
    for (std::size_t b = 0; b < config.buckets; ++b)
      det.weights[b] -= config.learning_rate * (grad[b] + config.l2 * det.weights[b]);
    det.bias -= config.learning_rate * gbias;
  }
  return det;
}

}  // namespace humpa
