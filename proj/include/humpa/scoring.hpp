#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "humpa/classifier.hpp"
#include "humpa/detectors.hpp"
#include "humpa/parallel.hpp"

namespace humpa {

enum class DetectorKind { likelihood, logrank, lrr, detectgpt, npr, fast_detectgpt, dna_gpt, classifier };

inline constexpr std::array<DetectorKind, 8> kAllDetectors{
    DetectorKind::likelihood, DetectorKind::logrank,        DetectorKind::lrr,     DetectorKind::detectgpt,
    DetectorKind::npr,        DetectorKind::fast_detectgpt, DetectorKind::dna_gpt, DetectorKind::classifier};

inline std::string_view to_string(DetectorKind d) {
  switch (d) {
    case DetectorKind::likelihood: return "likelihood";
    case DetectorKind::logrank: return "logrank";
    case DetectorKind::lrr: return "lrr";
    case DetectorKind::detectgpt: return "detectgpt";
    case DetectorKind::npr: return "npr";
    case DetectorKind::fast_detectgpt: return "fast_detectgpt";
    case DetectorKind::dna_gpt: return "dna_gpt";
    case DetectorKind::classifier: return "classifier";
  }
  return "unknown";
}

inline DetectorKind detector_from_string(std::string_view s) {
  for (DetectorKind d : kAllDetectors)
    if (to_string(d) == s) return d;
  throw std::invalid_argument("unknown detector: " + std::string(s));
}

// The models a detector suite consults. White-box and black-box settings
// differ only in which models are plugged in here.
struct Wiring {
  std::string name;
  const LanguageModel* scoring = nullptr;
  const LanguageModel* sampling = nullptr;  // Fast-DetectGPT resampling model
  const LanguageModel* regen = nullptr;     // DNA-GPT regeneration model
  const ClassifierDetector* classifier = nullptr;
};

// One optional score per detector in `detectors`; empty when the passage was
// skipped for that detector.
using ScoreRow = std::vector<std::optional<double>>;

// Scores one passage under every wiring. Perturbations depend only on the
// passage and the filler model, so they are drawn once and reused by
// DetectGPT and NPR in all wirings.
inline std::vector<ScoreRow> score_passage(const Passage& p, const std::vector<Wiring>& wirings,
                                           const LanguageModel& filler, const DetectorConfig& config,
                                           const std::vector<DetectorKind>& detectors) {
  std::vector<ScoreRow> rows(wirings.size(), ScoreRow(detectors.size()));
  if (p.response.empty()) return rows;
  bool need_perturb = false;
  for (DetectorKind d : detectors) need_perturb |= d == DetectorKind::detectgpt || d == DetectorKind::npr;
  std::vector<Passage> perturbed;
  if (need_perturb && p.response.size() >= config.span_length) perturbed = perturbation_set(p, filler, config);

  for (std::size_t w = 0; w < wirings.size(); ++w) {
    const Wiring& wr = wirings[w];
    const TokenStats base = token_stats(*wr.scoring, p.prompt, p.response);
    std::optional<PerturbationLog> plog;
    if (!perturbed.empty()) {
      plog.emplace();
      plog->original_logprob = base.total_logprob();
      plog->original_mean_log_rank = base.mean_log_rank();
      for (const auto& q : perturbed) {
        const TokenStats st = token_stats_edited(*wr.scoring, p.prompt, p.response, base, q.response);
        plog->perturbed_logprob.push_back(st.total_logprob());
        plog->perturbed_mean_log_rank.push_back(st.mean_log_rank());
      }
    }
    for (std::size_t k = 0; k < detectors.size(); ++k) {
      auto& out = rows[w][k];
      switch (detectors[k]) {
        case DetectorKind::likelihood: out = likelihood_from(base); break;
        case DetectorKind::logrank: out = logrank_from(base); break;
        case DetectorKind::lrr: out = lrr_from(base, config.epsilon); break;
        case DetectorKind::detectgpt:
          if (plog && plog->perturbed_logprob.size() >= 2) out = detectgpt_from(*plog, config.epsilon);
          break;
        case DetectorKind::npr:
          if (plog) out = npr_from(*plog, config.epsilon);
          break;
        case DetectorKind::fast_detectgpt:
          out = fast_detectgpt_from(curvature_moments(p, *wr.scoring, *wr.sampling), config.epsilon);
          break;
        case DetectorKind::dna_gpt:
          try {
            out = dna_gpt_score(p, *wr.regen, config);
          } catch (const DetectorSkip&) {
          }
          break;
        case DetectorKind::classifier:
          if (wr.classifier) out = wr.classifier->score(p.response);
          break;
      }
    }
  }
  return rows;
}

// scores[wiring][detector][passage]
using ScoreTable = std::vector<std::vector<std::vector<std::optional<double>>>>;

inline ScoreTable score_passages(const std::vector<Passage>& passages, const std::vector<Wiring>& wirings,
                                 const LanguageModel& filler, const DetectorConfig& config,
                                 const std::vector<DetectorKind>& detectors, std::size_t jobs = 1) {
  std::vector<std::vector<ScoreRow>> per_passage(passages.size());
  parallel_for(passages.size(), jobs,
               [&](std::size_t i) { per_passage[i] = score_passage(passages[i], wirings, filler, config, detectors); });
  ScoreTable table(wirings.size(), std::vector<std::vector<std::optional<double>>>(
                                       detectors.size(), std::vector<std::optional<double>>(passages.size())));
  for (std::size_t i = 0; i < passages.size(); ++i)
    for (std::size_t w = 0; w < wirings.size(); ++w)
      for (std::size_t k = 0; k < detectors.size(); ++k) table[w][k][i] = per_passage[i][w][k];
  return table;
}

// Machine-likeness of (x, y) under one detector and wiring, for labeling
// preference pairs. The pseudo passage id is derived from the tokens so
// perturbation and regeneration seeds are reproducible.
inline double single_score(DetectorKind d, TokenSpan prompt, TokenSpan response, const Wiring& wiring,
                           const LanguageModel& filler, const DetectorConfig& config) {
  Passage p;
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (TokenId t : prompt) h = splitmix64(h ^ t);
  h = splitmix64(h ^ 0xABCDEFULL);
  for (TokenId t : response) h = splitmix64(h ^ t);
  p.id = "pair:" + std::to_string(h);
  p.prompt.assign(prompt.begin(), prompt.end());
  p.response.assign(response.begin(), response.end());
  const auto row = score_passage(p, {wiring}, filler, config, {d});
  // A passage a detector cannot score is treated as neutral.
  return row[0][0].value_or(0.0);
}

}  // namespace humpa
