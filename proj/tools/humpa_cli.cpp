// humpa: command-line front end for the toy detector-evasion pipeline.
//
// Every subcommand reads the same JSON experiment config (--config), so a
// chain of fit-lm / gen / prefs / dpo / attack / score reproduces what
// `eval` does in one go.

#include <cstdio>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "humpa/humpa.hpp"

using namespace humpa;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  bool quiet = false;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c;
  if (!g.config_path.empty()) c = config_from_json(read_json_file(g.config_path));
  if (g.seed) c.seed = *g.seed;
  return c;
}

ProgressFn progress(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& stage) { std::cerr << "[humpa] " << stage << "\n"; };
}

ModelBundle load_bundle(const std::string& path) {
  try {
    return load_model(path);
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

// Human eval passages under a saved model's vocabulary.
std::vector<Passage> eval_passages(const ExperimentConfig& c, const Vocabulary& vocab, SkipLog* skips) {
  const auto split = load_corpus(c);
  return make_human_passages(split.eval, vocab, c.prefix_len, c.max_len, skips);
}

void report_skips(const SkipLog& skips) {
  for (const auto& [reason, n] : skips.reasons) std::cerr << "[humpa] skipped " << n << " passages: " << reason << "\n";
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

void print_theorem_table(const std::vector<TheoremReport>& reps) {
  std::size_t width = 10;
  for (const auto& r : reps)
    for (const auto& a : r.assertions) width = std::max(width, r.name.size() + a.name.size() + 3);
  for (const auto& r : reps)
    for (const auto& a : r.assertions)
      std::cout << std::left << std::setw(static_cast<int>(width)) << (r.name + " : " + a.name) << "  "
                << (a.passed ? "PASS" : "FAIL") << "  dev=" << std::scientific << std::setprecision(3) << a.deviation
                << "  tol=" << a.tolerance << std::defaultfloat << "\n";
}

void print_headlines(const EvalReport& rep) {
  std::cout << "detector         setting  auroc_ref  alpha  auroc_attacked  rel_decrease\n";
  for (const auto& h : rep.headlines) {
    std::cout << std::left << std::setw(17) << h.detector << std::setw(9) << h.setting;
    const MetricRow* any = nullptr;
    for (const auto& r : rep.rows)
      if (r.detector == h.detector && r.setting == h.setting) any = &r;
    if (!h.alpha || !any) {
      std::cout << std::fixed << std::setprecision(4) << (any ? any->auroc_before : 0.0) << "     (no alpha within budget)\n";
      continue;
    }
    const auto* row = rep.find(h.detector, h.setting, *h.alpha);
    std::cout << std::fixed << std::setprecision(4) << row->auroc_before << "     " << std::setprecision(1) << *h.alpha
              << "    " << std::setprecision(4) << row->auroc_after << "          " << row->rel_decrease << "\n";
  }
  std::cout << std::defaultfloat;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stress-test machine-text detectors with a proxy-tuned attack on toy n-gram models"};
  app.fallthrough();  // global options may also follow the subcommand
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", g.quiet, "No progress messages");

  // fit-lm
  std::string role = "large", out;
  auto* fit = app.add_subcommand("fit-lm", "Fit one of the n-gram models on the training split");
  fit->add_option("--role", role, "large, small, surrogate or perturbation")
      ->check(CLI::IsMember({"large", "small", "surrogate", "perturbation"}));
  fit->add_option("-o,--out", out, "Model file")->required();

  // gen
  std::string model_path, human_out;
  auto* gen = app.add_subcommand("gen", "Sample machine_ref continuations of the eval prompts");
  gen->add_option("--model", model_path, "Generating model")->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", out, "Passages (JSONL)")->required();
  gen->add_option("--human-out", human_out, "Also write the human eval passages here");

  // prefs
  std::string small_path, scorer_path, filler_path;
  auto* prefs = app.add_subcommand("prefs", "Build detector-labeled preference pairs from the small model");
  prefs->add_option("--small", small_path, "Reference small model")->required()->check(CLI::ExistingFile);
  prefs->add_option("--scorer", scorer_path, "Scoring model of the labeling detector")->required()->check(CLI::ExistingFile);
  prefs->add_option("--filler", filler_path, "Perturbation model (DetectGPT/NPR labeling)")->check(CLI::ExistingFile);
  prefs->add_option("-o,--out", out, "Preference pairs (JSONL)")->required();

  // dpo
  std::string prefs_path, loss_csv;
  std::optional<double> beta;
  auto* dpo = app.add_subcommand("dpo", "Train the small model on preference pairs");
  dpo->add_option("--small", small_path, "Reference small model")->required()->check(CLI::ExistingFile);
  dpo->add_option("--prefs", prefs_path, "Preference pairs (JSONL)")->required()->check(CLI::ExistingFile);
  dpo->add_option("--beta", beta, "KL coefficient (overrides the config)");
  dpo->add_option("--loss-csv", loss_csv, "Per-epoch loss trace");
  dpo->add_option("-o,--out", out, "Tuned model file")->required();

  // attack
  std::string large_path, tuned_path;
  double alpha = 1.0;
  auto* attack = app.add_subcommand("attack", "Generate machine_attacked text with the proxy ensemble");
  attack->add_option("--large", large_path, "Large model")->required()->check(CLI::ExistingFile);
  attack->add_option("--tuned", tuned_path, "Tuned small model (its base is the reference)")->required()->check(CLI::ExistingFile);
  attack->add_option("--alpha", alpha, "Attack ratio")->check(CLI::NonNegativeNumber);
  attack->add_option("-o,--out", out, "Passages (JSONL)")->required();

  // score
  std::vector<std::string> passage_files;
  std::string sampling_path;
  auto* score = app.add_subcommand("score", "Score passages with the configured zero-shot detectors");
  score->add_option("--passages", passage_files, "Passage files (JSONL)")->required()->check(CLI::ExistingFile);
  score->add_option("--scoring", scorer_path, "Scoring model")->required()->check(CLI::ExistingFile);
  score->add_option("--sampling", sampling_path, "Fast-DetectGPT sampling model (default: scoring)")->check(CLI::ExistingFile);
  score->add_option("--filler", filler_path, "Perturbation model (DetectGPT/NPR)")->check(CLI::ExistingFile);
  score->add_option("-o,--out", out, "Scores (CSV)")->required();

  // eval
  std::string out_dir;
  bool dump_scores = false;
  std::string sweep_betas;
  double sweep_alpha = 0.5;
  auto* eval = app.add_subcommand("eval", "Run the whole pipeline and write the report");
  eval->add_option("-o,--out", out_dir, "Report directory")->required();
  eval->add_flag("--dump-scores", dump_scores, "Also write per-passage scores");
  eval->add_option("--beta-sweep", sweep_betas, "Comma-separated betas to retrain at (e.g. 0.05,0.2,1.0)");
  eval->add_option("--sweep-alpha", sweep_alpha, "Attack ratio for the beta sweep");

  // verify-theorems
  std::size_t instances = 20;
  std::string theorem_json;
  auto* verify = app.add_subcommand("verify-theorems", "Check the theoretical claims on enumerable toy spaces");
  verify->add_option("--instances", instances, "Random instances for the beta-monotonicity checks");
  verify->add_option("-o,--out", theorem_json, "Write the reports as JSON");

  // report
  std::string report_path;
  auto* report = app.add_subcommand("report", "Re-emit CSV/ROC files and print headlines from report.json");
  report->add_option("--in", report_path, "report.json")->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", out_dir, "Output directory (default: print only)");

  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_config(g);

    if (*fit) {
      auto ctx = fit_experiment(cfg, g.jobs, progress(g));
      std::shared_ptr<const NGramModel> m = role == "large"       ? ctx.large
                                            : role == "small"     ? ctx.small
                                            : role == "surrogate" ? ctx.surrogate
                                                                  : ctx.filler;
      save_model(out, {ctx.vocab, m, nullptr});
      if (!g.quiet) std::cerr << "[humpa] " << role << ": order " << m->order() << ", vocabulary " << ctx.vocab->size() << "\n";
    } else if (*gen) {
      const auto b = load_bundle(model_path);
      SkipLog skips;
      const auto human = eval_passages(cfg, *b.vocab, &skips);
      report_skips(skips);
      const auto texts = make_machine_texts(b.model(), human, cfg.temperature, StageSeeds(cfg.seed).generation,
                                            Provenance::machine_ref, g.jobs);
      write_passages_jsonl(out, texts, *b.vocab);
      if (!human_out.empty()) write_passages_jsonl(human_out, human, *b.vocab);
      if (!g.quiet) std::cerr << "[humpa] wrote " << texts.size() << " passages\n";
    } else if (*prefs) {
      const auto small = load_bundle(small_path), scorer = load_bundle(scorer_path);
      if (cfg.labeling_detector == "classifier") throw std::invalid_argument("prefs: classifier labeling needs `eval`");
      std::optional<ModelBundle> filler;
      if (!filler_path.empty()) filler = load_bundle(filler_path);
      const LanguageModel& fill = filler ? filler->model() : scorer.model();
      const Wiring w{"labeling", &scorer.model(), &scorer.model(), &scorer.model(), nullptr};
      DetectorConfig dc = cfg.detectors;
      dc.seed = StageSeeds(cfg.seed).detectors;
      RewardFunction h = [](TokenSpan, TokenSpan) { return 0.0; };
      if (cfg.labeling_detector != "constant") {
        const DetectorKind d = detector_from_string(cfg.labeling_detector);
        h = [&, d](TokenSpan x, TokenSpan y) { return -single_score(d, x, y, w, fill, dc); };
      }
      auto split = load_corpus(cfg);
      split.train.resize(split.train.size() - std::min(cfg.classifier_holdout, split.train.size()));
      std::vector<TokenSequence> prompts;
      for (const auto& p : make_human_passages(split.train, *small.vocab, cfg.prefix_len, cfg.max_len)) {
        if (cfg.preference_prompts && prompts.size() >= cfg.preference_prompts) break;
        prompts.push_back(p.prompt);
      }
      PreferenceBuildStats st;
      const Labeling lab = cfg.labeling == "hard" ? Labeling::hard() : Labeling::bt(cfg.bt_scale);
      const auto pairs = build_preferences(small.model(), prompts, h, cfg.pairs_per_prompt, lab,
                                           {cfg.max_len, cfg.temperature, StageSeeds(cfg.seed).preferences}, g.jobs, &st);
      write_preferences_jsonl(out, pairs);
      if (!g.quiet) std::cerr << "[humpa] " << st.pairs << " pairs, " << st.ties << " ties, " << st.skipped_degenerate << " degenerate\n";
    } else if (*dpo) {
      const auto small = load_bundle(small_path);
      if (small.loglinear) throw std::invalid_argument("dpo: --small must be a plain n-gram model");
      const auto pairs = read_preferences_jsonl(prefs_path);
      DpoConfig dc = cfg.dpo;
      if (beta) dc.beta = *beta;
      dc.seed = StageSeeds(cfg.seed).dpo;
      auto res = dpo_train(HashedLogLinearLM(small.ngram, cfg.loglinear_buckets, cfg.loglinear_context_feature), *small.ngram, pairs, dc);
      auto tuned = std::make_shared<const HashedLogLinearLM>(std::move(res.model));
      save_model(out, {small.vocab, small.ngram, tuned});
      if (!loss_csv.empty()) write_loss_trace_csv(loss_csv, res.epoch_losses);
      for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
        if (!g.quiet) std::cerr << "[humpa] epoch " << e + 1 << " loss " << res.epoch_losses[e] << "\n";
    } else if (*attack) {
      const auto large = load_bundle(large_path), tuned = load_bundle(tuned_path);
      if (!tuned.loglinear) throw std::invalid_argument("attack: --tuned must be a DPO-trained model");
      const ProxyEnsemble ens(large.model_ptr(), tuned.loglinear, tuned.ngram, alpha);
      SkipLog skips;
      const auto human = eval_passages(cfg, *large.vocab, &skips);
      report_skips(skips);
      const auto texts = make_machine_texts(ens, human, cfg.temperature, StageSeeds(cfg.seed).generation,
                                            Provenance::machine_attacked, g.jobs);
      write_passages_jsonl(out, texts, *large.vocab);
      if (!g.quiet) std::cerr << "[humpa] wrote " << texts.size() << " attacked passages at alpha " << alpha << "\n";
    } else if (*score) {
      const auto scoring = load_bundle(scorer_path);
      std::optional<ModelBundle> sampling, filler;
      if (!sampling_path.empty()) sampling = load_bundle(sampling_path);
      if (!filler_path.empty()) filler = load_bundle(filler_path);
      std::vector<DetectorKind> dets;
      for (const auto& n : cfg.detector_names)
        if (n != "classifier") dets.push_back(detector_from_string(n));
      const Wiring w{"cli", &scoring.model(), sampling ? &sampling->model() : &scoring.model(), &scoring.model(), nullptr};
      DetectorConfig dc = cfg.detectors;
      dc.seed = StageSeeds(cfg.seed).detectors;
      std::string csv = "passage_id,provenance,detector,score\n";
      for (const auto& f : passage_files) {
        const auto ps = read_passages_jsonl(f);
        const auto table = score_passages(ps, {w}, filler ? filler->model() : scoring.model(), dc, dets, g.jobs);
        for (std::size_t i = 0; i < ps.size(); ++i)
          for (std::size_t k = 0; k < dets.size(); ++k)
            if (const auto& v = table[0][k][i])
              csv += ps[i].id + "," + std::string(to_string(ps[i].provenance)) + "," + std::string(to_string(dets[k])) +
                     "," + format_double(*v) + "\n";
      }
      write_text_file(out, csv);
    } else if (*eval) {
      PipelineArtifacts art;
      RunOptions opt{g.jobs, progress(g), &art};
      const auto rep = run_pipeline(cfg, opt);
      emit_report(rep, out_dir);
      if (dump_scores) {
        write_text_file(std::filesystem::path(out_dir) / "scores_white.csv", score_dump_csv(art, 0, cfg.alpha_grid));
        write_text_file(std::filesystem::path(out_dir) / "scores_black.csv", score_dump_csv(art, 1, cfg.alpha_grid));
        write_preferences_jsonl((std::filesystem::path(out_dir) / "preferences.jsonl").string(), art.preferences);
      }
      if (!sweep_betas.empty()) {
        auto ctx = prepare_experiment(cfg, g.jobs);
        const auto pts = beta_sweep(ctx, art.preferences, parse_list(sweep_betas), sweep_alpha);
        std::string csv = "beta,alpha,auroc_before,auroc_after,final_loss\n";
        for (const auto& p : pts)
          csv += format_double(p.beta) + "," + format_double(sweep_alpha) + "," + format_double(p.auroc_before) + "," +
                 format_double(p.auroc_after) + "," + format_double(p.final_loss) + "\n";
        write_text_file(std::filesystem::path(out_dir) / "beta_sweep.csv", csv);
      }
      print_headlines(rep);
    } else if (*verify) {
      TheoremSuiteOptions opt;
      opt.seed = cfg.seed;
      opt.theorem1_instances = instances;
      const auto reps = run_theorem_suite(opt);
      print_theorem_table(reps);
      if (!theorem_json.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : reps) j.push_back(r.to_json());
        write_json_file(theorem_json, j);
      }
      const bool ok = std::all_of(reps.begin(), reps.end(), [](const auto& r) { return r.passed(); });
      return ok ? 0 : 1;
    } else if (*report) {
      const auto rep = report_from_json(read_json_file(report_path));
      if (!out_dir.empty()) emit_report(rep, out_dir, {false, true, true});
      print_headlines(rep);
    }
  } catch (const PipelineError& e) {
    std::cerr << "humpa: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "humpa: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
