#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace humpa {

// Detector scores split by class; machine text is the positive class.
struct ScoreSample {
  std::vector<double> positives;
  std::vector<double> negatives;

  ScoreSample swapped() const { return {negatives, positives}; }
};

namespace detail {

inline void require_both_classes(const ScoreSample& s, const char* who) {
  if (s.positives.empty() || s.negatives.empty()) throw std::invalid_argument(std::string(who) + ": empty class");
}

// Distinct scores in descending order with the number of positives and
// negatives at each.
struct ScoreBlock {
  double score;
  std::size_t pos;
  std::size_t neg;
};

inline std::vector<ScoreBlock> descending_blocks(const ScoreSample& s) {
  std::vector<std::pair<double, bool>> all;
  all.reserve(s.positives.size() + s.negatives.size());
  for (double x : s.positives) all.emplace_back(x, true);
  for (double x : s.negatives) all.emplace_back(x, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<ScoreBlock> blocks;
  for (const auto& [score, positive] : all) {
    if (blocks.empty() || blocks.back().score != score) blocks.push_back({score, 0, 0});
    (positive ? blocks.back().pos : blocks.back().neg) += 1;
  }
  return blocks;
}

}  // namespace detail

// Mann-Whitney statistic: P(pos > neg) + 0.5 P(pos == neg). Pair counts are
// kept as exact integers (in half units) before the single final division.
inline double auroc(const ScoreSample& s) {
  detail::require_both_classes(s, "auroc");
  std::uint64_t twice_wins = 0;
  std::uint64_t neg_below = s.negatives.size();
  for (const auto& b : detail::descending_blocks(s)) {
    neg_below -= b.neg;
    twice_wins += 2 * b.pos * neg_below + b.pos * b.neg;
  }
  const double pairs = static_cast<double>(s.positives.size()) * static_cast<double>(s.negatives.size());
  return static_cast<double>(twice_wins) / (2.0 * pairs);
}

// Step-wise area under the precision-recall curve: thresholds walk the
// distinct scores from high to low, tied scores enter as one block, and each
// recall increment is weighted by the precision at that threshold.
inline double auprc(const ScoreSample& s) {
  detail::require_both_classes(s, "auprc");
  const double p_total = static_cast<double>(s.positives.size());
  std::size_t tp = 0, fp = 0;
  double area = 0.0, prev_recall = 0.0;
  for (const auto& b : detail::descending_blocks(s)) {
    tp += b.pos;
    fp += b.neg;
    const double recall = static_cast<double>(tp) / p_total;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

struct RocPoint {
  double fpr;
  double tpr;
};

// ROC points at every distinct threshold, starting at (0,0) and ending at
// (1,1).
inline std::vector<RocPoint> roc_curve(const ScoreSample& s) {
  detail::require_both_classes(s, "roc_curve");
  const double p = static_cast<double>(s.positives.size());
  const double n = static_cast<double>(s.negatives.size());
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (const auto& b : detail::descending_blocks(s)) {
    tp += b.pos;
    fp += b.neg;
    pts.push_back({static_cast<double>(fp) / n, static_cast<double>(tp) / p});
  }
  if (pts.back().fpr != 1.0 || pts.back().tpr != 1.0) pts.push_back({1.0, 1.0});
  return pts;
}

// Highest TPR among realizable thresholds whose FPR does not exceed the
// target. No interpolation.
inline double tpr_at_fpr(const ScoreSample& s, double target_fpr) {
  if (!(target_fpr >= 0.0 && target_fpr <= 1.0)) throw std::invalid_argument("tpr_at_fpr: target outside [0,1]");
  double best = 0.0;
  for (const auto& pt : roc_curve(s))
    if (pt.fpr <= target_fpr) best = std::max(best, pt.tpr);
  return best;
}

inline double relative_decrease(double before, double after) {
  if (!(before > 0.0)) throw std::invalid_argument("relative_decrease: baseline must be positive");
  return (before - after) / before;
}

// ---- ROUGE -----------------------------------------------------------------

// Lower-cased whitespace tokens.
inline std::vector<std::string> rouge_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace detail {

inline double f1(double overlap, double cand_total, double ref_total) {
  if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const double precision = overlap / cand_total;
  const double recall = overlap / ref_total;
  return 2.0 * precision * recall / (precision + recall);
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& words,
                                                                   std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i)
    ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace detail

// ROUGE-N F1 with clipped n-gram counts.
inline double rouge_n(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                      std::size_t n) {
  if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
  if (candidate.size() < n || reference.size() < n) return 0.0;
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return detail::f1(static_cast<double>(overlap), static_cast<double>(candidate.size() - n + 1),
                    static_cast<double>(reference.size() - n + 1));
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ROUGE-L F1 from the longest common subsequence.
inline double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  return detail::f1(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                    static_cast<double>(reference.size()));
}

struct UtilityReport {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

// Mean ROUGE of candidates against paired references.
inline UtilityReport mean_utility(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("mean_utility: size mismatch");
  UtilityReport r;
  if (candidates.empty()) return r;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = rouge_words(candidates[i]);
    const auto ref = rouge_words(references[i]);
    r.rouge1 += rouge_n(c, ref, 1);
    r.rouge2 += rouge_n(c, ref, 2);
    r.rougeL += rouge_l(c, ref);
  }
  const double n = static_cast<double>(candidates.size());
  r.rouge1 /= n;
  r.rouge2 /= n;
  r.rougeL /= n;
  return r;
}

}  // namespace humpa
