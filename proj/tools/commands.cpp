#include "commands.hpp"

#include <filesystem>
#include <functional>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>

#include "kbqa/checkpoint.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/runner.hpp"
#include "kbqa/synthetic.hpp"

namespace kbqa::cli {

namespace {

// Flags shared by every subcommand. Values only override the config file
// when the flag was actually given.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string fold;
  std::string variant;
  std::size_t iterations = 0;
  std::size_t threads = 0;
  std::string out;
  std::string data;
  RunPaths paths;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* fold_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* iterations_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* out_opt = nullptr;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "JSON config file; flags win over its values");
    seed_opt = app->add_option("--seed", seed, "Random seed");
    fold_opt = app->add_option("--fold", fold, "Fold 1..5 or 'all'");
    variant_opt = app->add_option("--variant", variant, "Scorer inputs: Q+I, Q+VC or Q+I+VC");
    iterations_opt = app->add_option("--iterations", iterations, "Hard-negative mining iterations T");
    threads_opt = app->add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
    out_opt = app->add_option("--out", out, "Output directory");
    app->add_option("--data", data, "Directory holding the synthetic fixture files");
    app->add_option("--kb", paths.kb, "Knowledge-base TSV");
    app->add_option("--qa", paths.qa, "QA records (JSON lines)");
    app->add_option("--features", paths.features, "Image feature file");
    app->add_option("--concepts", paths.concepts, "Visual concept file");
    app->add_option("--concept-labels", paths.concept_labels, "Concept label list");
    app->add_option("--vectors", paths.vectors, "Word-vector file");
    app->add_option("--checkpoints", paths.checkpoints, "Checkpoint directory (default: --out)");
    app->add_option("--feature-cache", paths.feature_cache, "Packed feature cache path");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (!data.empty()) {
      const auto f = SyntheticFiles::in(data);
      c.paths.kb = f.kb;
      c.paths.qa = f.qa;
      c.paths.features = f.features;
      c.paths.concepts = f.concepts;
      c.paths.concept_labels = f.concept_labels;
      c.paths.vectors = f.vectors;
    }
    const std::pair<const std::string*, std::string*> path_overrides[] = {
        {&paths.kb, &c.paths.kb},
        {&paths.qa, &c.paths.qa},
        {&paths.features, &c.paths.features},
        {&paths.concepts, &c.paths.concepts},
        {&paths.concept_labels, &c.paths.concept_labels},
        {&paths.vectors, &c.paths.vectors},
        {&paths.checkpoints, &c.paths.checkpoints},
        {&paths.feature_cache, &c.paths.feature_cache},
    };
    for (const auto& [flag, dst] : path_overrides) {
      if (!flag->empty()) *dst = *flag;
    }
    if (seed_opt->count()) c.seed = seed;
    if (fold_opt->count()) c.fold = fold;
    if (variant_opt->count()) {
      const auto v = parse_variant(variant);
      if (!v) throw UsageError("--variant: expected Q+I, Q+VC or Q+I+VC, got '" + variant + "'");
      c.variant = *v;
    }
    if (iterations_opt->count()) c.margin.iterations = iterations;
    if (threads_opt->count()) c.threads = threads;
    if (out_opt->count()) c.paths.out = out;
    return c;
  }
};

void write_config_snapshot(const RunConfig& c, const std::string& name) {
  write_file_atomic((std::filesystem::path(c.paths.out) / name).string(), c.to_json_text() + "\n");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fact-based visual question answering: training, evaluation and querying"};
  app.require_subcommand(1);
  std::function<void()> action;

  Common train_common;
  std::string kind = "all";
  std::size_t epochs = 0;
  bool reinit = false;
  auto* train = app.add_subcommand("train", "Train the relation, source and/or scorer models per fold");
  train_common.add_to(train);
  train->add_option("--kind", kind, "relation, source, scorer or all")
      ->check(CLI::IsMember({"relation", "source", "scorer", "all"}));
  auto* epochs_opt = train->add_option("--epochs", epochs, "Scorer epochs per mining iteration")->check(CLI::PositiveNumber);
  train->add_flag("--reinit", reinit, "Re-initialise scorer weights at every mining iteration");
  train->callback([&] {
    action = [&] {
      RunConfig c = train_common.resolve();
      if (epochs_opt->count()) c.margin.epochs = epochs;
      if (reinit) c.margin.reinitialize = true;
      c.finalize();
      const auto kinds = kind == "all" ? std::vector<ModelKind>{ModelKind::kRelation, ModelKind::kSource, ModelKind::kScorer}
                                       : std::vector<ModelKind>{*parse_model_kind(kind)};
      const bool need_vectors = kind == "all" || kind == "scorer";
      const LoadedData data = load_run_data(c, need_vectors);
      write_config_snapshot(c, "train_config.json");
      for (ModelKind k : kinds) run_train(c, k, data, err);
      out << "trained " << kind << " (config " << c.hash() << ", seed " << c.seed << ") -> " << c.paths.out << "\n";
    };
  });

  Common eval_common;
  bool gt_relation = false, gt_source = false, random_ties = false, raw_match = false, fallback = false;
  std::size_t top_m = 1;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate trained checkpoints per fold and on average");
  eval_common.add_to(evaluate);
  evaluate->add_flag("--gt-relation", gt_relation, "Use the groundtruth relation");
  evaluate->add_flag("--gt-source", gt_source, "Use the groundtruth answer source");
  evaluate->add_flag("--random-ties", random_ties, "Seeded random tie-break instead of fact-id order");
  evaluate->add_flag("--raw-match", raw_match, "Compare answers without case folding");
  evaluate->add_flag("--fallback", fallback, "Try the next relation when a bucket is empty");
  auto* top_m_opt = evaluate->add_option("--top-m", top_m, "Union candidates over the top-m relations")
                        ->check(CLI::Range(1, 13));
  evaluate->callback([&] {
    action = [&] {
      RunConfig c = eval_common.resolve();
      c.eval.gt_relation = c.eval.gt_relation || gt_relation;
      c.eval.gt_source = c.eval.gt_source || gt_source;
      c.eval.random_tie_break = c.eval.random_tie_break || random_ties;
      c.eval.raw_match = c.eval.raw_match || raw_match;
      c.eval.fallback_next_relation = c.eval.fallback_next_relation || fallback;
      if (top_m_opt->count()) c.eval.relation_top_m = top_m;
      c.finalize();
      const auto report = run_evaluate(c, err);
      if (c.folds().size() == 1) out << "fold=" << c.folds().front() << "\n";
      out << report.table << "metrics: " << report.metrics_file << "\n";
    };
  });

  Common answer_common;
  std::string image, question;
  std::size_t k = 3;
  auto* answer = app.add_subcommand("answer", "Answer one question about one image");
  answer_common.add_to(answer);
  answer->add_option("--image", image, "Image id")->required();
  answer->add_option("--question", question, "Question text")->required();
  auto* k_opt = answer->add_option("--k", k, "Facts to list")->check(CLI::PositiveNumber);
  answer->callback([&] {
    action = [&] {
      RunConfig c = answer_common.resolve();
      if (k_opt->count()) c.eval.k = k;
      if (!answer_common.fold_opt->count() && c.fold == "all") c.fold = "1";
      c.finalize();
      out << run_answer(c, image, question).text;
    };
  });

  Common synth_common;
  SyntheticConfig sc;
  auto* synth = app.add_subcommand("synth", "Write the six synthetic fixture files");
  synth_common.add_to(synth);
  auto* facts_opt = synth->add_option("--facts", sc.num_facts, "Number of facts")->check(CLI::PositiveNumber);
  auto* questions_opt = synth->add_option("--questions", sc.num_questions, "Number of QA pairs")->check(CLI::PositiveNumber);
  auto* signal_opt = synth->add_option("--concept-signal", sc.concept_signal, "P(subject concept bit hot)")
                         ->check(CLI::Range(0.0, 1.0));
  auto* mix_opt = synth->add_option("--image-fraction", sc.image_source_fraction, "Fraction of Image-source questions")
                      ->check(CLI::Range(0.0, 1.0));
  synth->callback([&] {
    action = [&] {
      RunConfig c = synth_common.resolve();
      SyntheticConfig cfg = c.synth;
      // Fixture widths follow the model config so the files load without edits.
      cfg.word_dim = c.word_dim;
      cfg.image_dim = c.dims.image_dim;
      cfg.concept_dim = c.dims.concept_dim;
      if (synth_common.seed_opt->count()) cfg.seed = c.seed;
      if (facts_opt->count()) cfg.num_facts = sc.num_facts;
      if (questions_opt->count()) cfg.num_questions = sc.num_questions;
      if (signal_opt->count()) cfg.concept_signal = sc.concept_signal;
      if (mix_opt->count()) cfg.image_source_fraction = sc.image_source_fraction;
      const auto data = generate_synthetic(cfg);
      const auto files = write_synthetic(data, c.paths.out);
      const auto stats = kb_stats(data.dataset.kb);
      out << "wrote " << files.kb << ", " << files.qa << ", " << files.features << ", " << files.concepts << ", "
          << files.concept_labels << ", " << files.vectors << "\n"
          << "facts " << stats.total_facts << ", questions " << data.dataset.instances.size()
          << ", question vocabulary " << data.question_vocabulary.size() << ", seed " << cfg.seed << "\n";
    };
  });

  std::string stats_path;
  auto* stats = app.add_subcommand("kb-stats", "Per-relation fact counts and vocabulary size of a KB");
  Common stats_common;
  stats_common.add_to(stats);
  stats->add_option("kb_path", stats_path, "Knowledge-base TSV (or use --kb)");
  stats->callback([&] {
    action = [&] {
      RunConfig c = stats_common.resolve();
      const std::string path = stats_path.empty() ? c.paths.kb : stats_path;
      if (path.empty()) throw UsageError("--kb is required");
      if (!std::filesystem::exists(path)) throw UsageError("--kb: no such file '" + path + "'");
      out << kb_stats_table(kb_stats(parse_kb(path)));
    };
  });

  std::string q_json, f_json, fold_lists;
  Common convert_common;
  auto* convert = app.add_subcommand("convert-fvqa", "Convert the FVQA release layout into kb.tsv + qa.jsonl");
  convert_common.add_to(convert);
  convert->add_option("--questions", q_json, "Question dictionary JSON")->required();
  convert->add_option("--facts", f_json, "Fact dictionary JSON")->required();
  convert->add_option("--fold-lists", fold_lists, "Directory with test_list_0..4.txt");
  convert->callback([&] {
    action = [&] {
      const RunConfig c = convert_common.resolve();
      for (const auto& [flag, p] : {std::pair{"--questions", &q_json}, std::pair{"--facts", &f_json}}) {
        if (!std::filesystem::exists(*p)) throw UsageError(std::string(flag) + ": no such file '" + *p + "'");
      }
      const auto r = convert_fvqa(q_json, f_json, fold_lists, c.paths.out);
      out << "converted " << r.facts << " facts, " << r.questions << " questions (" << r.skipped << " skipped) -> "
          << c.paths.out << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    if (action) action();
    return 0;
  } catch (const std::invalid_argument& e) {  // UsageError, ShapeError
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace kbqa::cli
