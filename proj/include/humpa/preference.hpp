#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "humpa/language_model.hpp"
#include "humpa/parallel.hpp"

namespace humpa {

// Maps (prompt, response) to a real. Used both for detector human-ness
// scores and for explicit rewards on enumerable spaces.
using RewardFunction = std::function<double(TokenSpan prompt, TokenSpan response)>;

struct PreferencePair {
  TokenSequence prompt;
  TokenSequence preferred;
  TokenSequence dispreferred;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

// Numerically stable logistic function.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(sigmoid(z)) without overflow.
inline double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

// Bradley-Terry probability that the response with reward r_w beats the one
// with reward r_l.
inline double bt_probability(double r_w, double r_l) { return sigmoid(r_w - r_l); }

struct Labeling {
  enum class Kind { hard, bradley_terry };
  Kind kind = Kind::hard;
  double scale = 1.0;  // C in r = C * s, bradley_terry only

  static Labeling hard() { return {}; }
  static Labeling bt(double c) { return {Kind::bradley_terry, c}; }
};

struct GenerationSettings {
  std::size_t max_len = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct PreferenceBuildStats {
  std::size_t pairs = 0;
  std::size_t ties = 0;
  std::size_t skipped_degenerate = 0;
};

inline constexpr int kDegenerateRetries = 8;

// Decides whether y1 is preferred over y2 given their human-ness scores.
// Exact ties (hard mode) are a fair coin drawn from `rng`.
inline bool prefer_first(double s1, double s2, const Labeling& labeling, Rng& rng) {
  if (labeling.kind == Labeling::Kind::hard) {
    if (s1 != s2) return s1 > s2;
    return rng.coin();
  }
  const double p = bt_probability(labeling.scale * s1, labeling.scale * s2);
  return rng.uniform() < p;
}

// Samples response pairs from `ref_model` for each prompt and labels them
// with the human-ness function. Every random draw is seeded from
// (gen.seed, prompt index, pair index, attempt), so the output does not
// depend on `jobs`.
inline std::vector<PreferencePair> build_preferences(const LanguageModel& ref_model,
                                                     const std::vector<TokenSequence>& prompts,
                                                     const RewardFunction& humanness, int pairs_per_prompt,
                                                     const Labeling& labeling, const GenerationSettings& gen,
                                                     std::size_t jobs = 1, PreferenceBuildStats* stats = nullptr) {
  if (pairs_per_prompt < 1) throw std::invalid_argument("pairs_per_prompt must be >= 1");
  struct Slot {
    std::vector<PreferencePair> pairs;
    std::size_t ties = 0, skipped = 0;
  };
  std::vector<Slot> slots(prompts.size());
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    const auto& x = prompts[i];
    Slot& slot = slots[i];
    for (int j = 0; j < pairs_per_prompt; ++j) {
      const auto pj = static_cast<std::uint64_t>(j);
      TokenSequence y1, y2;
      bool distinct = false;
      for (int attempt = 0; attempt < kDegenerateRetries && !distinct; ++attempt) {
        const auto a = static_cast<std::uint64_t>(attempt);
        y1 = sample(ref_model, x, gen.max_len, gen.temperature, derive_seed(gen.seed, {i, pj, a, 1}));
        y2 = sample(ref_model, x, gen.max_len, gen.temperature, derive_seed(gen.seed, {i, pj, a, 2}));
        distinct = y1 != y2;
      }
      if (!distinct) {
        ++slot.skipped;
        continue;
      }
      const double s1 = humanness(x, y1);
      const double s2 = humanness(x, y2);
      if (s1 == s2) ++slot.ties;
      Rng coin(derive_seed(gen.seed, {i, pj, 0xC0FFEE}));
      if (prefer_first(s1, s2, labeling, coin))
        slot.pairs.push_back({x, std::move(y1), std::move(y2)});
      else
        slot.pairs.push_back({x, std::move(y2), std::move(y1)});
    }
  });
  std::vector<PreferencePair> out;
  PreferenceBuildStats st;
  for (auto& s : slots) {
    st.ties += s.ties;
    st.skipped_degenerate += s.skipped;
    for (auto& p : s.pairs) out.push_back(std::move(p));
  }
  st.pairs = out.size();
  if (stats) *stats = st;
  return out;
}

inline void write_preferences_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const auto& p : pairs) {
    nlohmann::json j = {{"x", p.prompt}, {"yw", p.preferred}, {"yl", p.dispreferred}};
    os << j.dump() << '\n';
  }
}

inline std::vector<PreferencePair> read_preferences_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PreferencePair p{j.at("x").get<TokenSequence>(), j.at("yw").get<TokenSequence>(),
                       j.at("yl").get<TokenSequence>()};
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed preference record: " + e.what());
    }
  }
  return out;
}

}  // namespace humpa
