#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kbqa/dataio.hpp"
#include "kbqa/encoders.hpp"
#include "kbqa/kb.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

// y = subject when the source is Image, object otherwise. Verbatim.
const std::string& extract_answer(const Fact& fact, AnswerSource source);

// Casefold + trim; whitespace runs collapse to one space.
std::string normalize_answer(std::string_view s);
bool answers_match(std::string_view predicted, std::string_view expected, bool raw = false);

// Either classifier may be null when the matching oracle switch supplies the
// label instead.
struct Models {
  const RelationClassifier* relation = nullptr;
  const SourceClassifier* source = nullptr;
  const FactEmbedder* scorer = nullptr;
};

enum class TieBreakMode { kFactId, kRandom };

struct AnswerOptions {
  std::size_t k = 3;
  // Candidates are the union of the top-m predicted relations' buckets.
  std::size_t relation_top_m = 1;
  // On an empty bucket, move down the relation ranking instead of giving up.
  bool fallback_next_relation = false;
  TieBreakMode tie_break = TieBreakMode::kFactId;
  std::uint64_t tie_seed = 0;
  std::optional<Relation> gt_relation;
  std::optional<AnswerSource> gt_source;
};

struct Prediction {
  std::string question_id;
  Relation relation = Relation::kCategory;
  // Classifier ranking (top 3), empty under the relation oracle without a model.
  std::vector<std::pair<Relation, double>> relation_ranking;
  std::vector<ScoredFact> facts;
  AnswerSource source = AnswerSource::kImage;
  double image_probability = 0.0;
  std::string answer;
  // One answer per listed fact, all using the single predicted source.
  std::vector<std::string> answers;
  bool no_fact = false;
};

struct KbView {
  const KnowledgeBase& kb;
  const FactMatrix& facts;
};

Prediction answer_question(const Models& models, const KbView& kb, const ScorerInput& input,
                           const AnswerOptions& options, std::string question_id = "");

struct Metrics {
  double answer_at_1 = 0.0;
  double answer_at_3 = 0.0;
  double fact_at_1 = 0.0;
  double fact_at_3 = 0.0;
  double relation_at_1 = 0.0;
  double relation_at_3 = 0.0;
  double source_accuracy = 0.0;
  std::size_t questions = 0;
  std::size_t no_fact = 0;
};

struct EvalOptions {
  AnswerOptions answer;
  bool gt_relation = false;
  bool gt_source = false;
  bool raw_match = false;
  std::size_t threads = 1;
  // Prediction dump, one structured record per question, in input order.
  std::ostream* predictions = nullptr;
};

Metrics evaluate(const Models& models, const KbView& kb, const FeatureStore& features,
                 std::span<const QAInstance> questions, const EvalOptions& options);

// Unweighted mean over folds; counts are summed.
Metrics average(std::span<const Metrics> folds);

struct VariantModels {
  Variant variant;
  Models models;
};
std::vector<std::pair<Variant, Metrics>> ablate(std::span<const VariantModels> variants, const KbView& kb,
                                                const FeatureStore& features, std::span<const QAInstance> questions,
                                                const EvalOptions& options);

std::string prediction_to_json_line(const Prediction& p, const KnowledgeBase& kb, const QAInstance* truth = nullptr);

// Fixed-width table, percentages with two decimals.
std::string metrics_table(std::span<const std::pair<std::string, Metrics>> rows);

}  // namespace kbqa
