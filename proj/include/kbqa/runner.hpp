#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "kbqa/dataio.hpp"
#include "kbqa/encoders.hpp"
#include "kbqa/pipeline.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/synthetic.hpp"
#include "kbqa/trainer.hpp"

namespace kbqa {

inline constexpr const char* kVersion = "0.1.0";

struct RunPaths {
  std::string kb;
  std::string qa;
  std::string features;
  std::string concepts;
  std::string concept_labels;
  std::string vectors;
  std::string feature_cache;
  // Where checkpoints are read from; defaults to `out`.
  std::string checkpoints;
  std::string out = "run";
};

struct EvalSettings {
  std::size_t k = 3;
  std::size_t relation_top_m = 1;
  bool fallback_next_relation = false;
  bool gt_relation = false;
  bool gt_source = false;
  bool raw_match = false;
  bool random_tie_break = false;
};

struct RunConfig {
  RunPaths paths;
  std::uint64_t seed = 1;
  std::string fold = "all";
  Variant variant = Variant::kQuestionConcepts;
  std::size_t threads = 1;
  std::size_t word_dim = 100;
  ScorerDims dims;
  double scorer_dropout = 0.5;
  MarginConfig margin;
  ClassifierConfig relation = ClassifierConfig::relation_defaults();
  ClassifierConfig source = ClassifierConfig::source_defaults();
  EvalSettings eval;
  SyntheticConfig synth;

  // Unknown keys and wrong types raise UsageError.
  static RunConfig from_json_text(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::string& path);
  std::string to_json_text() const;
  // FNV-1a over the canonical config minus output locations and thread count,
  // which never change results.
  std::string hash() const;
  std::vector<int> folds() const;
  // Derives per-model seeds from `seed` and pushes shared settings down.
  void finalize();
};

enum class ModelKind { kRelation, kSource, kScorer };
std::string_view to_string(ModelKind k);
std::optional<ModelKind> parse_model_kind(std::string_view s);

std::string checkpoint_path(const std::string& dir, int fold, ModelKind kind);
std::string fold_dir(const std::string& dir, int fold);

// Requires the flags needed to load a dataset; the message names the flag.
void require_dataset_paths(const RunConfig& config, bool need_vectors);

struct LoadedData {
  Dataset dataset;
  WordVectorTable vectors{1};
  FactMatrix facts;
};
LoadedData load_run_data(const RunConfig& config, bool need_vectors);

struct TrainReport {
  std::vector<std::string> checkpoints;
  std::vector<std::string> metrics_files;
  // Held-out accuracy (classifiers) or final precision@1 (scorer), per fold.
  std::vector<double> heldout;
};
TrainReport run_train(const RunConfig& config, ModelKind kind, std::ostream& log);
TrainReport run_train(const RunConfig& config, ModelKind kind, const LoadedData& data, std::ostream& log);

struct EvaluateReport {
  std::vector<std::pair<std::string, Metrics>> rows;  // per fold, then "average"
  std::string table;
  std::string metrics_file;
};
EvaluateReport run_evaluate(const RunConfig& config, std::ostream& log);
EvaluateReport run_evaluate(const RunConfig& config, const LoadedData& data, std::ostream& log);

struct AnswerReport {
  Prediction prediction;
  std::string text;
};
AnswerReport run_answer(const RunConfig& config, const std::string& image_id, const std::string& question);

// Metrics file round trip.
std::string metrics_report_json(const RunConfig& config, std::span<const std::pair<std::string, Metrics>> rows);
std::vector<std::pair<std::string, Metrics>> parse_metrics_report(const std::string& text);

std::string kb_stats_table(const KbStats& stats);

// Converts the public release layout (question and fact dictionaries plus
// optional per-fold image lists) into kb.tsv + qa.jsonl.
struct ConvertReport {
  std::size_t facts = 0;
  std::size_t questions = 0;
  std::size_t skipped = 0;
};
ConvertReport convert_fvqa(const std::string& questions_json, const std::string& facts_json,
                           const std::string& fold_dir, const std::string& out_dir);

}  // namespace kbqa
