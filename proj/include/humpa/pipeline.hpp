#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "humpa/classifier.hpp"
#include "humpa/corpus.hpp"
#include "humpa/decoding.hpp"
#include "humpa/dpo.hpp"
#include "humpa/metrics.hpp"
#include "humpa/ngram_model.hpp"
#include "humpa/scoring.hpp"
#include "humpa/serialization.hpp"
#include "humpa/synthetic.hpp"
#include "humpa/vocabulary.hpp"

namespace humpa {

struct LmSettings {
  int order = 3;
  double k = 0.01;
  double backoff = 1.0;

  friend bool operator==(const LmSettings&, const LmSettings&) = default;
};

struct ExperimentConfig {
  // Corpus. With no train paths the synthetic grammar is used.
  std::vector<std::string> train_paths;
  std::vector<std::string> eval_paths;
  // The defaults are the toy detection setup: half of 1000 synthetic
  // documents (500 texts) held out for evaluation, word tokens, and
  // near-unsmoothed n-grams that reproduce their training text closely.
  double eval_fraction = 0.5;
  SyntheticCorpusConfig synthetic{.documents = 1000, .name_rate = 0.0};
  TokenizerMode tokenizer = TokenizerMode::word;

  LmSettings large{4, 1e-5, 0.3};
  LmSettings small{3, 1e-5, 0.3};
  LmSettings surrogate{3, 1e-5, 0.3};
  LmSettings perturbation{2, 0.1};
  std::size_t loglinear_buckets = 1u << 16;
  // Adds the trainable context-association weight (see HashedLogLinearLM).
  // Off gives the plain hashed table.
  bool loglinear_context_feature = true;

  std::size_t prefix_len = 8;
  std::size_t max_len = 48;
  double temperature = 1.0;

  std::size_t preference_prompts = 0;  // 0: every training record
  int pairs_per_prompt = 2;
  std::string labeling = "hard";  // or "bt"
  double bt_scale = 1.0;
  std::string labeling_detector = "fast_detectgpt";  // any detector name, or "constant"
  std::string labeling_setting = "white";

  DpoConfig dpo{};
  std::vector<double> alpha_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

  DetectorConfig detectors{};
  std::vector<std::string> detector_names{"likelihood", "logrank", "lrr",     "detectgpt",
                                          "npr",        "fast_detectgpt", "dna_gpt", "classifier"};
  ClassifierConfig classifier{};
  std::size_t classifier_train_texts = 500;
  // Training records withheld from every LM and used only as classifier data.
  // With 0 the classifier reuses the LM training records, whose machine
  // continuations an overfit model can copy verbatim.
  std::size_t classifier_holdout = 150;

  double rouge1_budget = 0.03;
  std::size_t eval_samples = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha_grid.empty()) throw std::invalid_argument("config: alpha_grid must be nonempty");
    for (double a : alpha_grid)
      if (!(a >= 0.0) || !std::isfinite(a)) throw std::invalid_argument("config: alpha values must be finite and >= 0");
    if (detector_names.empty()) throw std::invalid_argument("config: detector list must be nonempty");
    for (const auto& d : detector_names) detector_from_string(d);
    if (labeling_detector != "constant") detector_from_string(labeling_detector);
    if (labeling != "hard" && labeling != "bt") throw std::invalid_argument("config: labeling must be hard or bt");
    if (labeling_setting != "white" && labeling_setting != "black")
      throw std::invalid_argument("config: labeling_setting must be white or black");
    if (prefix_len == 0) throw std::invalid_argument("config: prefix_len must be positive");
    if (max_len == 0) throw std::invalid_argument("config: max_len must be positive");
    if (!(temperature >= 0.0)) throw std::invalid_argument("config: temperature must be >= 0");
    if (pairs_per_prompt < 1) throw std::invalid_argument("config: pairs_per_prompt must be >= 1");
    if (eval_samples == 0) throw std::invalid_argument("config: eval_samples must be positive");
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw std::invalid_argument("config: eval_fraction outside (0,1)");
    if (!(rouge1_budget >= 0.0)) throw std::invalid_argument("config: rouge1_budget must be >= 0");
    for (const auto& p : train_paths)
      if (!std::filesystem::exists(p)) throw std::invalid_argument("config: missing corpus file " + p);
    for (const auto& p : eval_paths)
      if (!std::filesystem::exists(p)) throw std::invalid_argument("config: missing corpus file " + p);
    dpo.validate();
    detectors.validate();
  }
};

// ---- config JSON --------------------------------------------------------------

namespace detail {

// Reads known keys and rejects unknown ones so typos in config files fail
// loudly.
class KeyReader {
 public:
  KeyReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  template <typename T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (j_.contains(key)) {
      try {
        out = j_.at(key).get<T>();
      } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(where_ + "." + key + ": " + e.what());
      }
    }
  }
  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw std::invalid_argument(where_ + ": unknown key '" + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto lm = [](const LmSettings& s) { return nlohmann::json{{"order", s.order}, {"k", s.k}, {"backoff", s.backoff}}; };
  return {
      {"train_paths", c.train_paths},
      {"eval_paths", c.eval_paths},
      {"eval_fraction", c.eval_fraction},
      {"synthetic",
       {{"documents", c.synthetic.documents},
        {"min_sentences", c.synthetic.min_sentences},
        {"max_sentences", c.synthetic.max_sentences},
        {"topics", c.synthetic.topics},
        {"lexicon", c.synthetic.lexicon},
        {"names_per_document", c.synthetic.names_per_document},
        {"name_rate", c.synthetic.name_rate}}},
      {"tokenizer", std::string(to_string(c.tokenizer))},
      {"large", lm(c.large)},
      {"small", lm(c.small)},
      {"surrogate", lm(c.surrogate)},
      {"perturbation", lm(c.perturbation)},
      {"loglinear_buckets", c.loglinear_buckets},
      {"loglinear_context_feature", c.loglinear_context_feature},
      {"prefix_len", c.prefix_len},
      {"max_len", c.max_len},
      {"temperature", c.temperature},
      {"preference_prompts", c.preference_prompts},
      {"pairs_per_prompt", c.pairs_per_prompt},
      {"labeling", c.labeling},
      {"bt_scale", c.bt_scale},
      {"labeling_detector", c.labeling_detector},
      {"labeling_setting", c.labeling_setting},
      {"dpo",
       {{"beta", c.dpo.beta},
        {"epochs", c.dpo.epochs},
        {"learning_rate", c.dpo.learning_rate},
        {"batch_size", c.dpo.batch_size},
        {"max_grad_norm", c.dpo.max_grad_norm}}},
      {"alpha_grid", c.alpha_grid},
      {"detectors",
       {{"n_perturbations", c.detectors.n_perturbations},
        {"mask_fraction", c.detectors.mask_fraction},
        {"span_length", c.detectors.span_length},
        {"dna_truncation_ratio", c.detectors.dna_truncation_ratio},
        {"dna_completions", c.detectors.dna_completions},
        {"dna_min_ngram", c.detectors.dna_min_ngram},
        {"dna_max_ngram", c.detectors.dna_max_ngram},
        {"dna_temperature", c.detectors.dna_temperature},
        {"perturbation_temperature", c.detectors.perturbation_temperature},
        {"epsilon", c.detectors.epsilon}}},
      {"detector_names", c.detector_names},
      {"classifier",
       {{"buckets", c.classifier.buckets},
        {"max_order", c.classifier.max_order},
        {"epochs", c.classifier.epochs},
        {"learning_rate", c.classifier.learning_rate},
        {"l2", c.classifier.l2}}},
      {"classifier_train_texts", c.classifier_train_texts},
      {"classifier_holdout", c.classifier_holdout},
      {"rouge1_budget", c.rouge1_budget},
      {"eval_samples", c.eval_samples},
      {"seed", c.seed},
  };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::KeyReader r(j, "config");
  r("train_paths", c.train_paths);
  r("eval_paths", c.eval_paths);
  r("eval_fraction", c.eval_fraction);
  if (const auto* s = r.sub("synthetic")) {
    detail::KeyReader rs(*s, "config.synthetic");
    rs("documents", c.synthetic.documents);
    rs("min_sentences", c.synthetic.min_sentences);
    rs("max_sentences", c.synthetic.max_sentences);
    rs("topics", c.synthetic.topics);
    rs("lexicon", c.synthetic.lexicon);
    rs("names_per_document", c.synthetic.names_per_document);
    rs("name_rate", c.synthetic.name_rate);
    rs.finish();
  }
  if (const auto* t = r.sub("tokenizer")) c.tokenizer = tokenizer_mode_from_string(t->get<std::string>());
  for (auto [key, dst] : {std::pair{"large", &c.large}, std::pair{"small", &c.small},
                          std::pair{"surrogate", &c.surrogate}, std::pair{"perturbation", &c.perturbation}}) {
    if (const auto* s = r.sub(key)) {
      detail::KeyReader rl(*s, std::string("config.") + key);
      rl("order", dst->order);
      rl("k", dst->k);
      rl("backoff", dst->backoff);
      rl.finish();
    }
  }
  r("loglinear_buckets", c.loglinear_buckets);
  r("loglinear_context_feature", c.loglinear_context_feature);
  r("prefix_len", c.prefix_len);
  r("max_len", c.max_len);
  r("temperature", c.temperature);
  r("preference_prompts", c.preference_prompts);
  r("pairs_per_prompt", c.pairs_per_prompt);
  r("labeling", c.labeling);
  r("bt_scale", c.bt_scale);
  r("labeling_detector", c.labeling_detector);
  r("labeling_setting", c.labeling_setting);
  if (const auto* s = r.sub("dpo")) {
    detail::KeyReader rd(*s, "config.dpo");
    rd("beta", c.dpo.beta);
    rd("epochs", c.dpo.epochs);
    rd("learning_rate", c.dpo.learning_rate);
    rd("batch_size", c.dpo.batch_size);
    rd("max_grad_norm", c.dpo.max_grad_norm);
    rd.finish();
  }
  r("alpha_grid", c.alpha_grid);
  if (const auto* s = r.sub("detectors")) {
    detail::KeyReader rd(*s, "config.detectors");
    rd("n_perturbations", c.detectors.n_perturbations);
    rd("mask_fraction", c.detectors.mask_fraction);
    rd("span_length", c.detectors.span_length);
    rd("dna_truncation_ratio", c.detectors.dna_truncation_ratio);
    rd("dna_completions", c.detectors.dna_completions);
    rd("dna_min_ngram", c.detectors.dna_min_ngram);
    rd("dna_max_ngram", c.detectors.dna_max_ngram);
    rd("dna_temperature", c.detectors.dna_temperature);
    rd("perturbation_temperature", c.detectors.perturbation_temperature);
    rd("epsilon", c.detectors.epsilon);
    rd.finish();
  }
  r("detector_names", c.detector_names);
  if (const auto* s = r.sub("classifier")) {
    detail::KeyReader rc(*s, "config.classifier");
    rc("buckets", c.classifier.buckets);
    rc("max_order", c.classifier.max_order);
    rc("epochs", c.classifier.epochs);
    rc("learning_rate", c.classifier.learning_rate);
    rc("l2", c.classifier.l2);
    rc.finish();
  }
  r("classifier_train_texts", c.classifier_train_texts);
  r("classifier_holdout", c.classifier_holdout);
  r("rouge1_budget", c.rouge1_budget);
  r("eval_samples", c.eval_samples);
  r("seed", c.seed);
  r.finish();
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  auto [end, ec] = std::to_chars(buf, buf + 16, fnv1a64(to_json(c).dump()), 16);
  return std::string(16 - static_cast<std::size_t>(end - buf), '0') + std::string(buf, end);
}

// Every random stream in the pipeline hangs off the master seed.
struct StageSeeds {
  std::uint64_t corpus, split, surrogate_half, generation, preferences, dpo, detectors, classifier;

  explicit StageSeeds(std::uint64_t master)
      : corpus(derive_seed(master, {0xC0}) ),
        split(derive_seed(master, {0x5B})),
        surrogate_half(derive_seed(master, {0x5A})),
        generation(derive_seed(master, {0x6E})),
        preferences(derive_seed(master, {0x9F})),
        dpo(derive_seed(master, {0xD0})),
        detectors(derive_seed(master, {0xDE})),
        classifier(derive_seed(master, {0xC1})) {}
};

// ---- report -------------------------------------------------------------------

struct MetricRow {
  std::string detector;
  std::string setting;
  double alpha = 0.0;
  double auroc_before = 0.0, auroc_after = 0.0, rel_decrease = 0.0;
  double auprc_before = 0.0, auprc_after = 0.0;
  double tpr1fpr_before = 0.0, tpr1fpr_after = 0.0;
  double rouge1_delta = 0.0;
  bool budget_ok = false;
  std::size_t n_human = 0, n_machine_ref = 0, n_attacked = 0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct Headline {
  std::string detector;
  std::string setting;
  std::optional<double> alpha;  // empty when no alpha meets the budget

  friend bool operator==(const Headline&, const Headline&) = default;
};

struct EvalReport {
  nlohmann::json config;
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::size_t> provenance_counts;
  std::map<std::string, std::size_t> skip_reasons;
  std::vector<double> alpha_grid;
  UtilityReport utility_ref;
  std::vector<UtilityReport> utility_attacked;  // parallel to alpha_grid
  std::vector<MetricRow> rows;
  std::vector<Headline> headlines;
  std::vector<double> dpo_loss_trace;
  PreferenceBuildStats preference_stats;
  double humanness_small_ref = 0.0;  // mean labeling human-ness of fresh small-model samples
  double humanness_small_tuned = 0.0;
  std::map<std::string, std::vector<RocPoint>> roc;  // "<detector>/<setting>/<source>"

  const MetricRow* find(std::string_view detector, std::string_view setting, double alpha) const {
    for (const auto& r : rows)
      if (r.detector == detector && r.setting == setting && r.alpha == alpha) return &r;
    return nullptr;
  }
};

inline bool operator==(const UtilityReport& a, const UtilityReport& b) {
  return a.rouge1 == b.rouge1 && a.rouge2 == b.rouge2 && a.rougeL == b.rougeL;
}
inline bool operator==(const PreferenceBuildStats& a, const PreferenceBuildStats& b) {
  return a.pairs == b.pairs && a.ties == b.ties && a.skipped_degenerate == b.skipped_degenerate;
}
inline bool operator==(const RocPoint& a, const RocPoint& b) { return a.fpr == b.fpr && a.tpr == b.tpr; }

inline bool operator==(const EvalReport& a, const EvalReport& b) {
  return a.config == b.config && a.config_hash == b.config_hash && a.master_seed == b.master_seed &&
         a.provenance_counts == b.provenance_counts && a.skip_reasons == b.skip_reasons && a.alpha_grid == b.alpha_grid &&
         a.utility_ref == b.utility_ref && a.utility_attacked == b.utility_attacked && a.rows == b.rows &&
         a.headlines == b.headlines && a.dpo_loss_trace == b.dpo_loss_trace && a.preference_stats == b.preference_stats &&
         a.humanness_small_ref == b.humanness_small_ref && a.humanness_small_tuned == b.humanness_small_tuned &&
         a.roc == b.roc;
}

inline nlohmann::json to_json(const UtilityReport& u) {
  return {{"rouge1", u.rouge1}, {"rouge2", u.rouge2}, {"rougeL", u.rougeL}};
}
inline UtilityReport utility_from_json(const nlohmann::json& j) {
  return {j.at("rouge1").get<double>(), j.at("rouge2").get<double>(), j.at("rougeL").get<double>()};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : r.rows)
    rows.push_back({{"detector", m.detector},
                    {"setting", m.setting},
                    {"alpha", m.alpha},
                    {"auroc_before", m.auroc_before},
                    {"auroc_after", m.auroc_after},
                    {"rel_decrease", m.rel_decrease},
                    {"auprc_before", m.auprc_before},
                    {"auprc_after", m.auprc_after},
                    {"tpr1fpr_before", m.tpr1fpr_before},
                    {"tpr1fpr_after", m.tpr1fpr_after},
                    {"rouge1_delta", m.rouge1_delta},
                    {"budget_ok", m.budget_ok},
                    {"n_human", m.n_human},
                    {"n_machine_ref", m.n_machine_ref},
                    {"n_attacked", m.n_attacked}});
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.headlines)
    heads.push_back({{"detector", h.detector},
                     {"setting", h.setting},
                     {"alpha", h.alpha ? nlohmann::json(*h.alpha) : nlohmann::json(nullptr)}});
  nlohmann::json util = nlohmann::json::array();
  for (const auto& u : r.utility_attacked) util.push_back(to_json(u));
  nlohmann::json roc = nlohmann::json::object();
  for (const auto& [key, pts] : r.roc) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : pts) arr.push_back({p.fpr, p.tpr});
    roc[key] = std::move(arr);
  }
  return {{"config", r.config},
          {"config_hash", r.config_hash},
          {"master_seed", r.master_seed},
          {"provenance_counts", r.provenance_counts},
          {"skip_reasons", r.skip_reasons},
          {"alpha_grid", r.alpha_grid},
          {"utility_ref", to_json(r.utility_ref)},
          {"utility_attacked", std::move(util)},
          {"rows", std::move(rows)},
          {"headlines", std::move(heads)},
          {"dpo_loss_trace", r.dpo_loss_trace},
          {"preference_stats",
           {{"pairs", r.preference_stats.pairs},
            {"ties", r.preference_stats.ties},
            {"skipped_degenerate", r.preference_stats.skipped_degenerate}}},
          {"humanness_small_ref", r.humanness_small_ref},
          {"humanness_small_tuned", r.humanness_small_tuned},
          {"roc", std::move(roc)}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.config = j.at("config");
  r.config_hash = j.at("config_hash").get<std::string>();
  r.master_seed = j.at("master_seed").get<std::uint64_t>();
  r.provenance_counts = j.at("provenance_counts").get<std::map<std::string, std::size_t>>();
  r.skip_reasons = j.at("skip_reasons").get<std::map<std::string, std::size_t>>();
  r.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
  r.utility_ref = utility_from_json(j.at("utility_ref"));
  for (const auto& u : j.at("utility_attacked")) r.utility_attacked.push_back(utility_from_json(u));
  for (const auto& m : j.at("rows")) {
    MetricRow row;
    row.detector = m.at("detector").get<std::string>();
    row.setting = m.at("setting").get<std::string>();
    row.alpha = m.at("alpha").get<double>();
    row.auroc_before = m.at("auroc_before").get<double>();
    row.auroc_after = m.at("auroc_after").get<double>();
    row.rel_decrease = m.at("rel_decrease").get<double>();
    row.auprc_before = m.at("auprc_before").get<double>();
    row.auprc_after = m.at("auprc_after").get<double>();
    row.tpr1fpr_before = m.at("tpr1fpr_before").get<double>();
    row.tpr1fpr_after = m.at("tpr1fpr_after").get<double>();
    row.rouge1_delta = m.at("rouge1_delta").get<double>();
    row.budget_ok = m.at("budget_ok").get<bool>();
    row.n_human = m.at("n_human").get<std::size_t>();
    row.n_machine_ref = m.at("n_machine_ref").get<std::size_t>();
    row.n_attacked = m.at("n_attacked").get<std::size_t>();
    r.rows.push_back(std::move(row));
  }
  for (const auto& h : j.at("headlines")) {
    Headline hl{h.at("detector").get<std::string>(), h.at("setting").get<std::string>(), std::nullopt};
    if (!h.at("alpha").is_null()) hl.alpha = h.at("alpha").get<double>();
    r.headlines.push_back(std::move(hl));
  }
  r.dpo_loss_trace = j.at("dpo_loss_trace").get<std::vector<double>>();
  const auto& ps = j.at("preference_stats");
  r.preference_stats = {ps.at("pairs").get<std::size_t>(), ps.at("ties").get<std::size_t>(),
                        ps.at("skipped_degenerate").get<std::size_t>()};
  r.humanness_small_ref = j.at("humanness_small_ref").get<double>();
  r.humanness_small_tuned = j.at("humanness_small_tuned").get<double>();
  for (const auto& [key, arr] : j.at("roc").items()) {
    std::vector<RocPoint> pts;
    for (const auto& p : arr) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    r.roc[key] = std::move(pts);
  }
  return r;
}

// ---- stages ---------------------------------------------------------------------

class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct CorpusSplit {
  std::vector<Record> train;
  std::vector<Record> eval;  // already capped at eval_samples
  std::size_t ingest_errors = 0;
};

inline CorpusSplit load_corpus(const ExperimentConfig& config) {
  const StageSeeds seeds(config.seed);
  CorpusSplit out;
  std::vector<Record> train, eval;
  if (config.train_paths.empty()) {
    SyntheticCorpusConfig syn = config.synthetic;
    syn.seed = seeds.corpus;
    train = synthetic_corpus(syn);
  } else {
    auto in = ingest(config.train_paths);
    out.ingest_errors += in.errors.size();
    train = std::move(in.records);
  }
  if (config.eval_paths.empty()) {
    Split s = split_records(std::move(train), config.eval_fraction, seeds.split);
    train = std::move(s.train);
    eval = std::move(s.eval);
  } else {
    auto in = ingest(config.eval_paths);
    out.ingest_errors += in.errors.size();
    eval = split_records(std::move(in.records), 1.0, seeds.split).eval;
    train = split_records(std::move(train), 0.0, seeds.split).train;
  }
  if (eval.size() > config.eval_samples) eval.resize(config.eval_samples);
  out.train = std::move(train);
  out.eval = std::move(eval);
  return out;
}

struct SkipLog {
  std::map<std::string, std::size_t> reasons;
  void add(const std::string& reason) { ++reasons[reason]; }
};

// Human passages: the first prefix_len tokens are the prompt and the
// remainder, capped at max_len, is the response.
inline std::vector<Passage> make_human_passages(const std::vector<Record>& records, const Vocabulary& vocab,
                                                std::size_t prefix_len, std::size_t max_len, SkipLog* skips = nullptr) {
  std::vector<Passage> out;
  for (const auto& r : records) {
    const TokenSequence ids = tokenize(r.text, vocab);
    if (ids.size() <= prefix_len) {
      if (skips) skips->add("no reference remainder");
      continue;
    }
    Passage p;
    p.id = r.id;
    p.prompt.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(prefix_len));
    const std::size_t len = std::min(max_len, ids.size() - prefix_len);
    p.response.assign(ids.begin() + static_cast<std::ptrdiff_t>(prefix_len),
                      ids.begin() + static_cast<std::ptrdiff_t>(prefix_len + len));
    p.provenance = Provenance::human;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::uint64_t generation_seed(std::uint64_t stage_seed, const std::string& id) {
  return derive_seed(stage_seed, {fnv1a64(id)});
}

// One continuation per human passage, from the same prompt and with the same
// length as the human response. Seeds depend only on the passage id, so a
// plain model and an alpha = 0 ensemble give identical text.
inline std::vector<Passage> make_machine_texts(const LanguageModel& model, const std::vector<Passage>& human,
                                               double temperature, std::uint64_t seed, Provenance provenance,
                                               std::size_t jobs = 1) {
  std::vector<Passage> out(human.size());
  parallel_for(human.size(), jobs, [&](std::size_t i) {
    const Passage& h = human[i];
    out[i] = {h.id, h.prompt, sample(model, h.prompt, h.response.size(), temperature, generation_seed(seed, h.id)),
              provenance};
  });
  return out;
}

inline std::vector<Passage> make_machine_texts(const LanguageModel& model, const std::vector<Record>& records,
                                               const Vocabulary& vocab, const ExperimentConfig& config,
                                               Provenance provenance, SkipLog* skips = nullptr, std::size_t jobs = 1) {
  const auto human = make_human_passages(records, vocab, config.prefix_len, config.max_len, skips);
  return make_machine_texts(model, human, config.temperature, StageSeeds(config.seed).generation, provenance, jobs);
}

inline std::vector<std::string> detokenize_responses(const std::vector<Passage>& ps, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(detokenize(p.response, vocab));
  return out;
}

// Models and wiring shared by every stage after fitting.
struct ExperimentContext {
  ExperimentConfig config;
  std::shared_ptr<const Vocabulary> vocab;
  std::vector<Record> train;
  std::vector<Record> eval;
  std::shared_ptr<const NGramModel> large, small, surrogate, filler;
  std::vector<Passage> human;        // eval passages
  std::vector<Passage> train_human;  // training-split passages (prompts for preferences)
  std::vector<Record> classifier_records;
  std::vector<Passage> classifier_human;
  std::vector<Passage> machine_ref;
  ClassifierDetector classifier_white, classifier_black;
  std::vector<DetectorKind> detectors;
  SkipLog skips;
  std::size_t jobs = 1;

  std::vector<Wiring> wirings() const {
    return {{"white", large.get(), large.get(), large.get(), &classifier_white},
            {"black", surrogate.get(), surrogate.get(), surrogate.get(), &classifier_black}};
  }
  Wiring labeling_wiring() const { return wirings()[config.labeling_setting == "white" ? 0 : 1]; }
};

using ProgressFn = std::function<void(const std::string&)>;

template <typename F>
auto run_stage(const std::string& name, const ProgressFn& progress, F&& f) {
  if (progress) progress(name);
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

// Validation, corpus loading and LM fitting; no generation yet.
inline ExperimentContext fit_experiment(const ExperimentConfig& config, std::size_t jobs = 1,
                                        const ProgressFn& progress = {}) {
  run_stage("validate config", progress, [&] {
    config.validate();
    return 0;
  });
  ExperimentContext ctx;
  ctx.config = config;
  ctx.jobs = jobs;
  const StageSeeds seeds(config.seed);
  run_stage("ingest corpus", progress, [&] {
    auto split = load_corpus(config);
    if (split.train.empty()) throw std::invalid_argument("training split is empty");
    if (split.eval.empty()) throw std::invalid_argument("evaluation split is empty");
    if (config.classifier_holdout >= split.train.size())
      throw std::invalid_argument("classifier_holdout leaves no training records");
    const auto cut = split.train.end() - static_cast<std::ptrdiff_t>(config.classifier_holdout);
    ctx.classifier_records.assign(cut, split.train.end());
    split.train.erase(cut, split.train.end());
    ctx.train = std::move(split.train);
    ctx.eval = std::move(split.eval);
    return 0;
  });
  run_stage("fit language models", progress, [&] {
    std::vector<std::string> texts;
    for (const auto& r : ctx.train) texts.push_back(r.text);
    ctx.vocab = std::make_shared<Vocabulary>(Vocabulary::from_texts(texts, config.tokenizer));
    std::vector<TokenSequence> seqs, half;
    for (const auto& r : ctx.train) seqs.push_back(tokenize(r.text, *ctx.vocab));
    // The surrogate sees a seeded half of the training records.
    Rng pick(seeds.surrogate_half);
    for (const auto& s : seqs)
      if (pick.coin()) half.push_back(s);
    if (half.empty()) half = seqs;
    const std::size_t V = ctx.vocab->size();
    ctx.large = std::make_shared<NGramModel>(NGramModel::fit(seqs, config.large.order, config.large.k, V, config.large.backoff));
    ctx.small = std::make_shared<NGramModel>(NGramModel::fit(seqs, config.small.order, config.small.k, V, config.small.backoff));
    ctx.surrogate = std::make_shared<NGramModel>(NGramModel::fit(half, config.surrogate.order, config.surrogate.k, V, config.surrogate.backoff));
    ctx.filler = std::make_shared<NGramModel>(NGramModel::fit(seqs, config.perturbation.order, config.perturbation.k, V, config.perturbation.backoff));
    return 0;
  });
  for (const auto& name : config.detector_names) ctx.detectors.push_back(detector_from_string(name));
  ctx.config.detectors.seed = seeds.detectors;
  return ctx;
}

inline ExperimentContext prepare_experiment(const ExperimentConfig& config, std::size_t jobs = 1,
                                            const ProgressFn& progress = {}) {
  ExperimentContext ctx = fit_experiment(config, jobs, progress);
  const StageSeeds seeds(config.seed);
  run_stage("generate machine_ref", progress, [&] {
    ctx.human = make_human_passages(ctx.eval, *ctx.vocab, config.prefix_len, config.max_len, &ctx.skips);
    ctx.train_human = make_human_passages(ctx.train, *ctx.vocab, config.prefix_len, config.max_len);
    ctx.classifier_human = config.classifier_holdout > 0
                               ? make_human_passages(ctx.classifier_records, *ctx.vocab, config.prefix_len, config.max_len)
                               : ctx.train_human;
    if (ctx.human.empty()) throw std::invalid_argument("no evaluation text is longer than prefix_len");
    ctx.machine_ref =
        make_machine_texts(*ctx.large, ctx.human, config.temperature, seeds.generation, Provenance::machine_ref, jobs);
    return 0;
  });
  run_stage("train classifiers", progress, [&] {
    const std::size_t n = std::min(config.classifier_train_texts, ctx.classifier_human.size());
    if (n == 0) throw std::invalid_argument("no training passages for the classifier");
    std::vector<Passage> humans(ctx.classifier_human.begin(), ctx.classifier_human.begin() + static_cast<std::ptrdiff_t>(n));
    for (int w = 0; w < 2; ++w) {
      const LanguageModel& gen = w == 0 ? *ctx.large : *ctx.surrogate;
      auto data = humans;
      auto machine = make_machine_texts(gen, humans, config.temperature, derive_seed(seeds.classifier, {static_cast<std::uint64_t>(w)}),
                                        Provenance::machine_ref, jobs);
      data.insert(data.end(), machine.begin(), machine.end());
      (w == 0 ? ctx.classifier_white : ctx.classifier_black) = train_classifier(data, config.classifier);
    }
    return 0;
  });
  return ctx;
}

// Human-ness s = -(machine-likeness) under the labeling detector; the
// "constant" labeler returns 0 for everything.
inline RewardFunction labeling_humanness(const ExperimentContext& ctx) {
  if (ctx.config.labeling_detector == "constant") return [](TokenSpan, TokenSpan) { return 0.0; };
  const DetectorKind d = detector_from_string(ctx.config.labeling_detector);
  const Wiring w = ctx.labeling_wiring();
  const ExperimentContext* c = &ctx;
  return [c, d, w](TokenSpan x, TokenSpan y) {
    return -single_score(d, x, y, w, *c->filler, c->config.detectors);
  };
}

inline std::vector<PreferencePair> build_experiment_preferences(const ExperimentContext& ctx,
                                                                PreferenceBuildStats* stats = nullptr) {
  const auto& cfg = ctx.config;
  std::vector<TokenSequence> prompts;
  for (const auto& p : ctx.train_human) {
    if (cfg.preference_prompts && prompts.size() >= cfg.preference_prompts) break;
    prompts.push_back(p.prompt);
  }
  const Labeling lab = cfg.labeling == "hard" ? Labeling::hard() : Labeling::bt(cfg.bt_scale);
  GenerationSettings gen{cfg.max_len, cfg.temperature, StageSeeds(cfg.seed).preferences};
  return build_preferences(*ctx.small, prompts, labeling_humanness(ctx), cfg.pairs_per_prompt, lab, gen, ctx.jobs, stats);
}

inline DpoResult train_experiment_dpo(const ExperimentContext& ctx, const std::vector<PreferencePair>& prefs,
                                      DpoConfig dpo) {
  dpo.seed = StageSeeds(ctx.config.seed).dpo;
  return dpo_train(HashedLogLinearLM(ctx.small, ctx.config.loglinear_buckets, ctx.config.loglinear_context_feature), *ctx.small, prefs, dpo);
}

inline std::vector<Passage> attacked_texts(const ExperimentContext& ctx, std::shared_ptr<const LanguageModel> tuned,
                                           double alpha) {
  const ProxyEnsemble ens(ctx.large, std::move(tuned), ctx.small, alpha);
  return make_machine_texts(ens, ctx.human, ctx.config.temperature, StageSeeds(ctx.config.seed).generation,
                            Provenance::machine_attacked, ctx.jobs);
}

inline ScoreSample score_sample(const std::vector<std::optional<double>>& machine,
                                const std::vector<std::optional<double>>& human) {
  ScoreSample s;
  for (const auto& v : machine)
    if (v) s.positives.push_back(*v);
  for (const auto& v : human)
    if (v) s.negatives.push_back(*v);
  return s;
}

// Mean human-ness of fresh samples on the evaluation prompts.
inline double mean_humanness(const ExperimentContext& ctx, const LanguageModel& model) {
  const auto texts = make_machine_texts(model, ctx.human, ctx.config.temperature,
                                        derive_seed(StageSeeds(ctx.config.seed).generation, {0x4E55}),
                                        Provenance::machine_ref, ctx.jobs);
  const auto h = labeling_humanness(ctx);
  std::vector<double> s(texts.size());
  parallel_for(texts.size(), ctx.jobs, [&](std::size_t i) { s[i] = h(texts[i].prompt, texts[i].response); });
  return texts.empty() ? 0.0 : mean_of(s);
}

// Raw material behind a report, for score dumps and further analysis.
struct PipelineArtifacts {
  std::shared_ptr<const Vocabulary> vocab;
  std::vector<Passage> human, machine_ref;
  std::vector<std::vector<Passage>> attacked;  // per alpha
  std::vector<std::string> settings;
  std::vector<DetectorKind> detectors;
  ScoreTable human_scores, ref_scores;
  std::vector<ScoreTable> attacked_scores;
  std::vector<PreferencePair> preferences;
  std::shared_ptr<const HashedLogLinearLM> tuned;
  std::shared_ptr<const NGramModel> large, small, surrogate, filler;
};

struct RunOptions {
  std::size_t jobs = 1;
  ProgressFn progress;
  PipelineArtifacts* artifacts = nullptr;
};

inline EvalReport run_pipeline(const ExperimentConfig& config, const RunOptions& opt = {}) {
  ExperimentContext ctx = prepare_experiment(config, opt.jobs, opt.progress);
  const auto& cfg = ctx.config;

  PreferenceBuildStats pstats;
  auto prefs = run_stage("build preferences", opt.progress, [&] {
    auto p = build_experiment_preferences(ctx, &pstats);
    if (p.empty()) throw std::runtime_error("no preference pairs were produced");
    return p;
  });
  auto dpo = run_stage("train DPO", opt.progress, [&] { return train_experiment_dpo(ctx, prefs, cfg.dpo); });
  auto tuned = std::make_shared<const HashedLogLinearLM>(std::move(dpo.model));

  std::vector<std::vector<Passage>> attacked;
  run_stage("generate machine_attacked", opt.progress, [&] {
    for (double a : cfg.alpha_grid) attacked.push_back(attacked_texts(ctx, tuned, a));
    return 0;
  });

  const auto wirings = ctx.wirings();
  ScoreTable hs, rs;
  std::vector<ScoreTable> as;
  run_stage("score passages", opt.progress, [&] {
    hs = score_passages(ctx.human, wirings, *ctx.filler, cfg.detectors, ctx.detectors, ctx.jobs);
    rs = score_passages(ctx.machine_ref, wirings, *ctx.filler, cfg.detectors, ctx.detectors, ctx.jobs);
    for (const auto& a : attacked)
      as.push_back(score_passages(a, wirings, *ctx.filler, cfg.detectors, ctx.detectors, ctx.jobs));
    return 0;
  });

  EvalReport rep;
  run_stage("compute metrics", opt.progress, [&] {
    rep.config = to_json(cfg);
    rep.config_hash = config_hash(cfg);
    rep.master_seed = cfg.seed;
    rep.skip_reasons = ctx.skips.reasons;
    rep.provenance_counts["human"] = ctx.human.size();
    rep.provenance_counts["machine_ref"] = ctx.machine_ref.size();
    std::size_t n_att = 0;
    for (const auto& a : attacked) n_att += a.size();
    rep.provenance_counts["machine_attacked"] = n_att;
    rep.alpha_grid = cfg.alpha_grid;
    rep.dpo_loss_trace = dpo.epoch_losses;
    rep.preference_stats = pstats;

    const auto refs = detokenize_responses(ctx.human, *ctx.vocab);
    rep.utility_ref = mean_utility(detokenize_responses(ctx.machine_ref, *ctx.vocab), refs);
    for (const auto& a : attacked) rep.utility_attacked.push_back(mean_utility(detokenize_responses(a, *ctx.vocab), refs));

    std::optional<std::size_t> headline_idx;
    for (std::size_t ai = 0; ai < cfg.alpha_grid.size(); ++ai) {
      const double delta = rep.utility_ref.rouge1 - rep.utility_attacked[ai].rouge1;
      if (delta <= cfg.rouge1_budget && (!headline_idx || cfg.alpha_grid[ai] > cfg.alpha_grid[*headline_idx]))
        headline_idx = ai;
    }

    for (std::size_t k = 0; k < ctx.detectors.size(); ++k) {
      const std::string det(to_string(ctx.detectors[k]));
      for (std::size_t w = 0; w < wirings.size(); ++w) {
        const ScoreSample before = score_sample(rs[w][k], hs[w][k]);
        if (before.positives.empty() || before.negatives.empty())
          throw std::runtime_error("detector " + det + " scored no passages in one class");
        const double auroc_b = auroc(before), auprc_b = auprc(before), tpr_b = tpr_at_fpr(before, 0.01);
        rep.roc[det + "/" + wirings[w].name + "/machine_ref"] = roc_curve(before);
        for (std::size_t ai = 0; ai < cfg.alpha_grid.size(); ++ai) {
          const ScoreSample after = score_sample(as[ai][w][k], hs[w][k]);
          if (after.positives.empty()) throw std::runtime_error("detector " + det + " scored no attacked passages");
          MetricRow row;
          row.detector = det;
          row.setting = wirings[w].name;
          row.alpha = cfg.alpha_grid[ai];
          row.auroc_before = auroc_b;
          row.auroc_after = auroc(after);
          row.rel_decrease = auroc_b > 0.0 ? relative_decrease(auroc_b, row.auroc_after) : 0.0;
          row.auprc_before = auprc_b;
          row.auprc_after = auprc(after);
          row.tpr1fpr_before = tpr_b;
          row.tpr1fpr_after = tpr_at_fpr(after, 0.01);
          row.rouge1_delta = rep.utility_ref.rouge1 - rep.utility_attacked[ai].rouge1;
          row.budget_ok = row.rouge1_delta <= cfg.rouge1_budget;
          row.n_human = before.negatives.size();
          row.n_machine_ref = before.positives.size();
          row.n_attacked = after.positives.size();
          rep.rows.push_back(std::move(row));
        }
        Headline h{det, wirings[w].name, std::nullopt};
        if (headline_idx) {
          h.alpha = cfg.alpha_grid[*headline_idx];
          rep.roc[det + "/" + wirings[w].name + "/machine_attacked"] =
              roc_curve(score_sample(as[*headline_idx][w][k], hs[w][k]));
        }
        rep.headlines.push_back(std::move(h));
      }
    }
    return 0;
  });
  run_stage("measure human-ness", opt.progress, [&] {
    rep.humanness_small_ref = mean_humanness(ctx, *ctx.small);
    rep.humanness_small_tuned = mean_humanness(ctx, *tuned);
    return 0;
  });

  if (opt.artifacts) {
    auto& a = *opt.artifacts;
    a.vocab = ctx.vocab;
    a.human = ctx.human;
    a.machine_ref = ctx.machine_ref;
    a.attacked = std::move(attacked);
    a.settings = {"white", "black"};
    a.detectors = ctx.detectors;
    a.human_scores = std::move(hs);
    a.ref_scores = std::move(rs);
    a.attacked_scores = std::move(as);
    a.preferences = std::move(prefs);
    a.tuned = tuned;
    a.large = ctx.large;
    a.small = ctx.small;
    a.surrogate = ctx.surrogate;
    a.filler = ctx.filler;
  }
  return rep;
}

// ---- beta sweep -----------------------------------------------------------------

struct BetaSweepPoint {
  double beta = 0.0;
  double auroc_before = 0.0;
  double auroc_after = 0.0;
  double final_loss = 0.0;
};

// Retrains the small model at each beta on the same preference data and
// measures the labeling detector (in the labeling wiring) against text
// attacked at `alpha`.
inline std::vector<BetaSweepPoint> beta_sweep(const ExperimentContext& ctx, const std::vector<PreferencePair>& prefs,
                                              const std::vector<double>& betas, double alpha) {
  if (ctx.config.labeling_detector == "constant") throw std::invalid_argument("beta_sweep: needs a real labeling detector");
  const DetectorKind d = detector_from_string(ctx.config.labeling_detector);
  const std::vector<Wiring> w{ctx.labeling_wiring()};
  const auto hs = score_passages(ctx.human, w, *ctx.filler, ctx.config.detectors, {d}, ctx.jobs);
  const auto rs = score_passages(ctx.machine_ref, w, *ctx.filler, ctx.config.detectors, {d}, ctx.jobs);
  const double before = auroc(score_sample(rs[0][0], hs[0][0]));
  std::vector<BetaSweepPoint> out;
  for (double beta : betas) {
    DpoConfig dc = ctx.config.dpo;
    dc.beta = beta;
    auto res = train_experiment_dpo(ctx, prefs, dc);
    auto tuned = std::make_shared<const HashedLogLinearLM>(std::move(res.model));
    const auto att = attacked_texts(ctx, tuned, alpha);
    const auto as = score_passages(att, w, *ctx.filler, ctx.config.detectors, {d}, ctx.jobs);
    out.push_back({beta, before, auroc(score_sample(as[0][0], hs[0][0])), res.epoch_losses.back()});
  }
  return out;
}

// ---- emission -------------------------------------------------------------------

inline Provenance provenance_from_string(std::string_view s) {
  for (Provenance p : {Provenance::human, Provenance::machine_ref, Provenance::machine_attacked})
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown provenance: " + std::string(s));
}

// One passage per line: id, provenance, prompt/response token ids and the
// detokenized response for reading.
inline void write_passages_jsonl(const std::string& path, const std::vector<Passage>& ps, const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& p : ps)
    os << nlohmann::json{{"id", p.id},
                         {"provenance", std::string(to_string(p.provenance))},
                         {"prompt", p.prompt},
                         {"response", p.response},
                         {"text", detokenize(p.response, vocab)}}
              .dump()
       << '\n';
}

inline std::vector<Passage> read_passages_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open passages file: " + path);
  std::vector<Passage> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<TokenSequence>(),
                     j.at("response").get<TokenSequence>(), provenance_from_string(j.at("provenance").get<std::string>())});
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

inline std::string metrics_csv(const EvalReport& r) {
  std::string s =
      "detector,setting,alpha,auroc_before,auroc_after,rel_decrease,auprc_before,auprc_after,tpr1fpr_before,"
      "tpr1fpr_after,rouge1_delta,budget_ok\n";
  for (const auto& m : r.rows) {
    s += m.detector + "," + m.setting + "," + format_double(m.alpha) + "," + format_double(m.auroc_before) + "," +
         format_double(m.auroc_after) + "," + format_double(m.rel_decrease) + "," + format_double(m.auprc_before) + "," +
         format_double(m.auprc_after) + "," + format_double(m.tpr1fpr_before) + "," + format_double(m.tpr1fpr_after) +
         "," + format_double(m.rouge1_delta) + "," + (m.budget_ok ? "true" : "false") + "\n";
  }
  return s;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

struct ReportFormats {
  bool json = true;
  bool csv = true;
  bool roc = true;
};

// Writes report.json, metrics.csv and roc/<detector>_<setting>_<source>.csv.
inline std::vector<std::filesystem::path> emit_report(const EvalReport& r, const std::filesystem::path& dir,
                                                      const ReportFormats& formats = {}) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  if (formats.json) {
    write_text_file(dir / "report.json", to_json(r).dump(2) + "\n");
    written.push_back(dir / "report.json");
  }
  if (formats.csv) {
    write_text_file(dir / "metrics.csv", metrics_csv(r));
    written.push_back(dir / "metrics.csv");
  }
  if (formats.roc) {
    std::filesystem::create_directories(dir / "roc");
    for (const auto& [key, pts] : r.roc) {
      std::string name = key;
      std::replace(name.begin(), name.end(), '/', '_');
      std::string s = "fpr,tpr\n";
      for (const auto& p : pts) s += format_double(p.fpr) + "," + format_double(p.tpr) + "\n";
      write_text_file(dir / "roc" / (name + ".csv"), s);
      written.push_back(dir / "roc" / (name + ".csv"));
    }
  }
  return written;
}

// passage_id,provenance,detector,score for one setting. Attacked passages
// carry their alpha in the id ("<id>@<alpha>").
inline std::string score_dump_csv(const PipelineArtifacts& a, std::size_t setting, const std::vector<double>& alphas) {
  std::string s = "passage_id,provenance,detector,score\n";
  auto emit = [&](const std::vector<Passage>& ps, const ScoreTable& t, const std::string& suffix) {
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (std::size_t k = 0; k < a.detectors.size(); ++k)
        if (const auto& v = t[setting][k][i])
          s += ps[i].id + suffix + "," + std::string(to_string(ps[i].provenance)) + "," +
               std::string(to_string(a.detectors[k])) + "," + format_double(*v) + "\n";
  };
  emit(a.human, a.human_scores, "");
  emit(a.machine_ref, a.ref_scores, "");
  for (std::size_t ai = 0; ai < a.attacked.size(); ++ai) emit(a.attacked[ai], a.attacked_scores[ai], "@" + format_double(alphas[ai]));
  return s;
}

}  // namespace humpa
