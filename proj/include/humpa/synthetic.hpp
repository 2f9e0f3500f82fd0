#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "humpa/corpus.hpp"
#include "humpa/rng.hpp"

namespace humpa {

// Seeded stochastic grammar producing English-like toy documents: a
// pseudo-word lexicon with Zipfian frequencies, a small phrase grammar with
// number agreement between subject and verb, a per-document topic that
// makes some nouns and verbs bursty, and a few per-document names that recur
// inside one document but never across documents. The agreement, topic and
// name effects reach further back than a character 4-gram can see.
struct SyntheticCorpusConfig {
  std::size_t documents = 1500;
  std::size_t min_sentences = 3;
  std::size_t max_sentences = 6;
  std::size_t topics = 8;
  std::size_t lexicon = 300;          // noun count; other word classes scale with it
  std::size_t names_per_document = 2;
  double name_rate = 0.25;            // chance that a noun phrase is a name
  std::uint64_t seed = 0;
};

namespace detail {

class ToyGrammar {
 public:
  explicit ToyGrammar(const SyntheticCorpusConfig& cfg) : cfg_(cfg) {
    Rng rng(derive_seed(cfg.seed, {0x1E71C0}));
    std::set<std::string> taken;
    auto make = [&](std::size_t n, std::size_t max_syll) {
      std::vector<std::string> words;
      while (words.size() < n) {
        std::string w = word(rng, max_syll);
        if (w.size() < 2 || w.back() == 's' || !taken.insert(w).second) continue;
        words.push_back(std::move(w));
      }
      return words;
    };
    const std::size_t n = std::max<std::size_t>(cfg.lexicon, 8);
    nouns_ = word_class(make(n, 3));
    verbs_ = word_class(make(std::max<std::size_t>(n / 2, 8), 2));
    adjectives_ = word_class(make(std::max<std::size_t>(n * 2 / 5, 8), 3));
    auto adverbs = make(std::max<std::size_t>(n / 6, 8), 2);
    for (auto& a : adverbs) a += "ly";
    adverbs_ = word_class(std::move(adverbs));
  }

  std::vector<Record> generate() const {
    const auto& cfg = cfg_;
    std::vector<Record> out;
    out.reserve(cfg.documents);
    const std::size_t width = std::to_string(cfg.documents).size();
    for (std::size_t d = 0; d < cfg.documents; ++d) {
      Rng rng(derive_seed(cfg.seed, {0xD0C, d}));
      const std::size_t topic = static_cast<std::size_t>(rng.below(std::max<std::size_t>(cfg.topics, 1)));
      const std::size_t n = cfg.min_sentences + static_cast<std::size_t>(rng.below(cfg.max_sentences - cfg.min_sentences + 1));
      Doc doc{topic, {}};
      for (std::size_t i = 0; i < cfg.names_per_document; ++i) doc.names.push_back(word(rng, 3) + word(rng, 2));
      std::string text;
      for (std::size_t s = 0; s < n; ++s) {
        if (!text.empty()) text += ' ';
        text += sentence(rng, doc);
      }
      std::string id = std::to_string(d);
      id.insert(0, width - id.size(), '0');
      out.push_back({"syn-" + id, std::move(text)});
    }
    return out;
  }

 private:
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                            "t", "v", "z", "sh", "th", "tr", "pl", "gr", "br", "ch"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ee", "oa"};
  static constexpr const char* kCodas[] = {"n", "r", "l", "t", "m", "k", "nd", "rt"};
  static constexpr const char* kDeterminers[] = {"the", "a", "this", "every", "some", "that"};
  static constexpr const char* kPlDeterminers[] = {"the", "these", "many", "some", "those", "all"};
  static constexpr const char* kPreps[] = {"of", "in", "with", "from", "near", "under", "for", "about"};
  static constexpr const char* kConj[] = {"and", "but", "while", "because", "so"};

  struct Doc {
    std::size_t topic;
    std::vector<std::string> names;
  };

  static std::string word(Rng& rng, std::size_t max_syll) {
    std::string w;
    const std::size_t syll = 1 + static_cast<std::size_t>(rng.below(max_syll));
    for (std::size_t s = 0; s < syll; ++s) {
      w += kOnsets[rng.below(std::size(kOnsets))];
      w += kVowels[rng.below(std::size(kVowels))];
      if (rng.uniform() < 0.35) w += kCodas[rng.below(std::size(kCodas))];
    }
    return w;
  }

  struct WordClass {
    std::vector<std::string> words;
    std::vector<double> cdf;  // Zipf over ranks
  };

  static WordClass word_class(std::vector<std::string> words) {
    WordClass c{std::move(words), {}};
    double z = 0.0;
    for (std::size_t r = 0; r < c.words.size(); ++r) c.cdf.push_back(z += 1.0 / std::pow(static_cast<double>(r) + 1.5, 1.05));
    for (double& x : c.cdf) x /= z;
    return c;
  }

  // Zipf draw, with the topic's block of words promoted to the front.
  static const std::string& pick(const WordClass& c, Rng& rng, std::size_t topic, bool topical) {
    const auto& words = c.words;
    const std::size_t n = words.size();
    const std::size_t r = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(c.cdf.begin(), c.cdf.end(), rng.uniform()) - c.cdf.begin()), n - 1);
    if (!topical) return words[r];
    const std::size_t block = n / 8;
    const std::size_t offset = (topic % 8) * block;
    // Ranks inside the first block map to this topic's block and vice versa.
    if (r < block) return words[offset + r];
    if (r >= offset && r < offset + block) return words[r - offset];
    return words[r];
  }

  std::string noun_phrase(Rng& rng, const Doc& doc, bool plural, int depth) const {
    const std::size_t topic = doc.topic;
    if (!plural && !doc.names.empty() && rng.uniform() < cfg_.name_rate) return doc.names[rng.below(doc.names.size())];
    std::string np = plural ? kPlDeterminers[rng.below(std::size(kPlDeterminers))]
                            : kDeterminers[rng.below(std::size(kDeterminers))];
    if (rng.uniform() < 0.4) np += " " + pick(adjectives_, rng, topic, false);
    np += " " + pick(nouns_, rng, topic, true);
    if (plural) np += "s";
    if (depth < 2 && rng.uniform() < 0.3)
      np += std::string(" ") + kPreps[rng.below(std::size(kPreps))] + " " + noun_phrase(rng, doc, rng.coin(), depth + 1);
    return np;
  }

  std::string clause(Rng& rng, const Doc& doc) const {
    const std::size_t topic = doc.topic;
    const bool plural = rng.uniform() < 0.4;
    std::string c = noun_phrase(rng, doc, plural, 0);
    if (rng.uniform() < 0.2) c += " " + pick(adverbs_, rng, topic, false);
    c += " " + pick(verbs_, rng, topic, true);
    if (!plural) c += "s";
    const double u = rng.uniform();
    if (u < 0.6)
      c += " " + noun_phrase(rng, doc, rng.uniform() < 0.4, 0);
    else if (u < 0.8)
      c += " " + pick(adverbs_, rng, topic, false);
    else
      c += std::string(" ") + kPreps[rng.below(std::size(kPreps))] + " " + noun_phrase(rng, doc, rng.coin(), 1);
    return c;
  }

  std::string sentence(Rng& rng, const Doc& doc) const {
    std::string s;
    const double u = rng.uniform();
    if (u < 0.15) {
      s = pick(adverbs_, rng, doc.topic, false) + ", " + clause(rng, doc);
    } else if (u < 0.4) {
      s = clause(rng, doc) + " " + kConj[rng.below(std::size(kConj))] + " " + clause(rng, doc);
    } else {
      s = clause(rng, doc);
    }
    return s + ".";
  }

  SyntheticCorpusConfig cfg_;
  WordClass nouns_, verbs_, adjectives_, adverbs_;
};

}  // namespace detail

inline std::vector<Record> synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  if (cfg.max_sentences < cfg.min_sentences || cfg.min_sentences == 0)
    throw std::invalid_argument("synthetic_corpus: bad sentence range");
  return detail::ToyGrammar(cfg).generate();
}

}  // namespace humpa
