#pragma once

#include <algorithm>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "humpa/loglinear_model.hpp"
#include "humpa/ngram_model.hpp"
#include "humpa/vocabulary.hpp"

namespace humpa {

// JSON model container. Doubles are written in shortest round-trip form, so
// load(save(m)) reproduces every weight bit for bit. Count tables are sorted
// by history so identical models serialize to identical bytes.
inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kHashSpec = "fnv1a64/u32le(history oldest-first, pad 0xFFFFFFFF)+u32le(candidate) mod B";

inline nlohmann::json vocabulary_to_json(const Vocabulary& vocab) {
  return {{"mode", std::string(to_string(vocab.mode()))}, {"symbols", vocab.symbols()}};
}

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
  return Vocabulary(j.at("symbols").get<std::vector<std::string>>(),
                    tokenizer_mode_from_string(j.at("mode").get<std::string>()));
}

inline nlohmann::json ngram_to_json(const NGramModel& model) {
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& table : model.tables()) {
    std::vector<std::pair<TokenSequence, const NGramModel::ContextCounts*>> rows;
    rows.reserve(table.size());
    for (const auto& [key, cc] : table) rows.emplace_back(NGramModel::decode(key), &cc);
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    nlohmann::json jt = nlohmann::json::array();
    for (const auto& [hist, cc] : rows) {
      // Sparse (token, count) pairs.
      nlohmann::json sparse = nlohmann::json::array();
      for (std::size_t v = 0; v < cc->counts.size(); ++v)
        if (cc->counts[v] != 0) sparse.push_back({v, cc->counts[v]});
      jt.push_back({{"h", hist}, {"c", std::move(sparse)}});
    }
    tables.push_back(std::move(jt));
  }
  return {{"vocab_size", model.vocab_size()}, {"order", model.order()}, {"k", model.k()}, {"backoff", model.backoff()}, {"tables", std::move(tables)}};
}

inline NGramModel ngram_from_json(const nlohmann::json& j) {
  NGramModel model(j.at("vocab_size").get<std::size_t>(), j.at("order").get<int>(), j.at("k").get<double>(),
                   j.at("backoff").get<double>());
  const auto& tables = j.at("tables");
  if (tables.size() != static_cast<std::size_t>(model.order())) throw std::runtime_error("model file: table count != order");
  for (std::size_t m = 0; m < tables.size(); ++m) {
    for (const auto& row : tables[m]) {
      const auto hist = row.at("h").get<TokenSequence>();
      if (hist.size() != m) throw std::runtime_error("model file: history length mismatch");
      NGramModel::ContextCounts cc;
      cc.counts.assign(model.vocab_size(), 0);
      for (const auto& pair : row.at("c")) {
        const auto v = pair.at(0).get<std::size_t>();
        if (v >= model.vocab_size()) throw std::runtime_error("model file: token id out of range");
        cc.counts[v] = pair.at(1).get<std::uint32_t>();
        cc.total += cc.counts[v];
        if (cc.counts[v] != 0) ++cc.distinct;
      }
      model.set_counts(static_cast<int>(m + 1), hist, std::move(cc));
    }
  }
  return model;
}

// A saved model: vocabulary plus either a bare n-gram model or a hashed
// log-linear model over its n-gram base.
struct ModelBundle {
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const NGramModel> ngram;
  std::shared_ptr<const HashedLogLinearLM> loglinear;  // may be null

  const LanguageModel& model() const {
    if (loglinear) return *loglinear;
    return *ngram;
  }
  std::shared_ptr<const LanguageModel> model_ptr() const {
    if (loglinear) return loglinear;
    return ngram;
  }
};

inline nlohmann::json bundle_to_json(const ModelBundle& b) {
  nlohmann::json j{{"format", "humpa-model"},
                   {"version", kModelFormatVersion},
                   {"vocabulary", vocabulary_to_json(*b.vocab)},
                   {"ngram", ngram_to_json(*b.ngram)}};
  if (b.loglinear) {
    j["kind"] = "loglinear";
    j["loglinear"] = {{"buckets", b.loglinear->buckets()},
                      {"hash", kHashSpec},
                      {"weights", b.loglinear->weights()},
                      {"context_feature", b.loglinear->has_context_feature()},
                      {"context_weight", b.loglinear->context_weight()}};
  } else {
    j["kind"] = "ngram";
  }
  return j;
}

inline ModelBundle bundle_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "humpa-model") throw std::runtime_error("not a model file");
  if (j.value("version", 0) != kModelFormatVersion) throw std::runtime_error("unsupported model file version");
  ModelBundle b;
  b.vocab = std::make_shared<Vocabulary>(vocabulary_from_json(j.at("vocabulary")));
  b.ngram = std::make_shared<NGramModel>(ngram_from_json(j.at("ngram")));
  if (b.ngram->vocab_size() != b.vocab->size()) throw std::runtime_error("model file: vocabulary size mismatch");
  if (j.at("kind") == "loglinear") {
    const auto& jl = j.at("loglinear");
    if (jl.at("hash") != kHashSpec) throw std::runtime_error("model file: unknown hash specification");
    auto ll = std::make_shared<HashedLogLinearLM>(b.ngram, jl.at("buckets").get<std::size_t>(),
                                                  jl.value("context_feature", false));
    auto w = jl.at("weights").get<std::vector<double>>();
    if (w.size() != ll->buckets()) throw std::runtime_error("model file: weight count mismatch");
    ll->mutable_weights() = std::move(w);
    ll->set_context_weight(jl.value("context_weight", 0.0));
    b.loglinear = std::move(ll);
  }
  return b;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

inline void save_model(const std::string& path, const ModelBundle& b) { write_json_file(path, bundle_to_json(b)); }
inline ModelBundle load_model(const std::string& path) { return bundle_from_json(read_json_file(path)); }

}  // namespace humpa
