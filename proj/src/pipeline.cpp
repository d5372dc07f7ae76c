#include "kbqa/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <ostream>
#include <set>

#include <json.hpp>

#include "kbqa/errors.hpp"
#include "kbqa/parallel.hpp"
#include "kbqa/random.hpp"

namespace kbqa {

const std::string& extract_answer(const Fact& fact, AnswerSource source) {
  return source == AnswerSource::kImage ? fact.subject : fact.object;
}

std::string normalize_answer(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

bool answers_match(std::string_view predicted, std::string_view expected, bool raw) {
  return raw ? predicted == expected : normalize_answer(predicted) == normalize_answer(expected);
}

Prediction answer_question(const Models& models, const KbView& view, const ScorerInput& input,
                           const AnswerOptions& options, std::string question_id) {
  if (!models.scorer) throw UsageError("answer_question: no scorer");
  if (options.k == 0) throw UsageError("answer_question: k must be positive");
  if (options.relation_top_m == 0 || options.relation_top_m > kNumRelations) {
    throw UsageError("answer_question: relation_top_m must be in 1..13");
  }
  Prediction p;
  p.question_id = std::move(question_id);

  // Relation order to draw buckets from.
  std::vector<Relation> order;
  if (models.relation) {
    const auto ranking = models.relation->predict(input.question);
    p.relation_ranking.assign(ranking.begin(), ranking.begin() + std::min<std::size_t>(3, ranking.size()));
    for (const auto& [r, prob] : ranking) order.push_back(r);
  } else if (!options.gt_relation) {
    throw UsageError("answer_question: no relation model and no groundtruth relation");
  }
  if (options.gt_relation) {
    std::erase(order, *options.gt_relation);
    order.insert(order.begin(), *options.gt_relation);
  }
  p.relation = order.front();

  if (options.gt_source) {
    p.source = *options.gt_source;
    p.image_probability = p.source == AnswerSource::kImage ? 1.0 : 0.0;
  } else if (models.source) {
    std::tie(p.source, p.image_probability) = models.source->predict(input.question);
  } else {
    throw UsageError("answer_question: no source model and no groundtruth source");
  }

  std::vector<std::size_t> candidates;
  std::size_t used = 0;
  while (used < order.size() &&
         (used < options.relation_top_m || (candidates.empty() && options.fallback_next_relation))) {
    const auto& bucket = view.kb.bucket(order[used++]);
    candidates.insert(candidates.end(), bucket.begin(), bucket.end());
  }
  // Report the relation that actually supplied the candidates.
  if (options.relation_top_m == 1) p.relation = order[used - 1];
  if (candidates.empty()) {
    p.no_fact = true;
    return p;
  }
  std::sort(candidates.begin(), candidates.end());

  Rng tie_rng(options.tie_seed ^ fnv1a(p.question_id));
  TieBreak tie;
  if (options.tie_break == TieBreakMode::kRandom) tie.rng = &tie_rng;
  p.facts = rank_facts(*models.scorer, view.kb, view.facts, candidates, input, options.k, tie);
  std::erase_if(p.facts, [](const ScoredFact& f) { return f.score == kExcludedScore; });
  if (p.facts.empty()) {
    p.no_fact = true;
    return p;
  }
  for (const auto& f : p.facts) p.answers.push_back(extract_answer(view.kb.fact(f.index), p.source));
  p.answer = p.answers.front();
  return p;
}

namespace {

struct Outcome {
  bool answer1 = false, answer3 = false;
  bool fact1 = false, fact3 = false;
  bool relation1 = false, relation3 = false;
  bool source = false;
  bool no_fact = false;
};

Outcome score_prediction(const Prediction& p, const QAInstance& q, const KnowledgeBase& kb, bool raw) {
  Outcome o;
  o.no_fact = p.no_fact;
  if (p.relation_ranking.empty()) {
    o.relation1 = o.relation3 = p.relation == q.relation;
  } else {
    for (std::size_t i = 0; i < p.relation_ranking.size() && i < 3; ++i) {
      if (p.relation_ranking[i].first == q.relation) {
        o.relation1 = i == 0;
        o.relation3 = true;
      }
    }
  }
  o.source = p.source == q.source;
  const auto gt = kb.index_of(q.fact_id);
  for (std::size_t i = 0; i < p.facts.size() && i < 3; ++i) {
    const bool fact_hit = gt && p.facts[i].index == *gt;
    const bool answer_hit = answers_match(p.answers[i], q.answer, raw);
    if (i == 0) {
      o.fact1 = fact_hit;
      o.answer1 = answer_hit;
    }
    o.fact3 = o.fact3 || fact_hit;
    o.answer3 = o.answer3 || answer_hit;
  }
  return o;
}

}  // namespace

std::string prediction_to_json_line(const Prediction& p, const KnowledgeBase& kb, const QAInstance* truth) {
  nlohmann::ordered_json j;
  j["question_id"] = p.question_id;
  j["relation"] = std::string(to_string(p.relation));
  auto ranking = nlohmann::ordered_json::array();
  for (const auto& [r, prob] : p.relation_ranking) ranking.push_back({{"relation", std::string(to_string(r))}, {"p", prob}});
  j["relation_ranking"] = ranking;
  j["source"] = std::string(to_string(p.source));
  j["p_image"] = p.image_probability;
  auto facts = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < p.facts.size(); ++i) {
    facts.push_back({{"fact_id", kb.fact(p.facts[i].index).id}, {"score", p.facts[i].score}, {"answer", p.answers[i]}});
  }
  j["facts"] = facts;
  j["answer"] = p.answer;
  j["status"] = p.no_fact ? "no_fact" : "ok";
  if (truth) {
    const Outcome o = score_prediction(p, *truth, kb, false);
    j["gt_fact_id"] = truth->fact_id;
    j["gt_answer"] = truth->answer;
    j["answer_correct"] = o.answer1;
    j["answer_correct_at_3"] = o.answer3;
    j["fact_correct"] = o.fact1;
    j["relation_correct"] = o.relation1;
    j["source_correct"] = o.source;
  }
  return j.dump();
}

Metrics evaluate(const Models& models, const KbView& view, const FeatureStore& features,
                 std::span<const QAInstance> questions, const EvalOptions& options) {
  std::vector<Outcome> outcomes(questions.size());
  std::vector<std::string> lines(options.predictions ? questions.size() : 0);
  // Validate up front so a missing image surfaces as a data error, not from a worker.
  for (const auto& q : questions) {
    if (!features.has_features(q.image_id) || !features.has_concepts(q.image_id)) {
      throw DataError("question " + q.question_id + ": no features for image '" + q.image_id + "'");
    }
  }
  parallel_for(questions.size(), options.threads, [&](std::size_t i) {
    const QAInstance& q = questions[i];
    AnswerOptions ao = options.answer;
    if (options.gt_relation) ao.gt_relation = q.relation;
    if (options.gt_source) ao.gt_source = q.source;
    const ScorerInput input{features.features(q.image_id), features.concepts(q.image_id), q.question};
    const Prediction p = answer_question(models, view, input, ao, q.question_id);
    outcomes[i] = score_prediction(p, q, view.kb, options.raw_match);
    if (options.predictions) lines[i] = prediction_to_json_line(p, view.kb, &q);
  });
  if (options.predictions) {
    for (const auto& l : lines) *options.predictions << l << '\n';
  }
  Metrics m;
  m.questions = questions.size();
  for (const auto& o : outcomes) {
    m.answer_at_1 += o.answer1;
    m.answer_at_3 += o.answer3;
    m.fact_at_1 += o.fact1;
    m.fact_at_3 += o.fact3;
    m.relation_at_1 += o.relation1;
    m.relation_at_3 += o.relation3;
    m.source_accuracy += o.source;
    m.no_fact += o.no_fact;
  }
  if (m.questions > 0) {
    const double n = static_cast<double>(m.questions);
    for (double* v : {&m.answer_at_1, &m.answer_at_3, &m.fact_at_1, &m.fact_at_3, &m.relation_at_1, &m.relation_at_3,
                      &m.source_accuracy}) {
      *v /= n;
    }
  }
  return m;
}

Metrics average(std::span<const Metrics> folds) {
  Metrics m;
  if (folds.empty()) return m;
  for (const auto& f : folds) {
    m.answer_at_1 += f.answer_at_1;
    m.answer_at_3 += f.answer_at_3;
    m.fact_at_1 += f.fact_at_1;
    m.fact_at_3 += f.fact_at_3;
    m.relation_at_1 += f.relation_at_1;
    m.relation_at_3 += f.relation_at_3;
    m.source_accuracy += f.source_accuracy;
    m.questions += f.questions;
    m.no_fact += f.no_fact;
  }
  const double n = static_cast<double>(folds.size());
  for (double* v : {&m.answer_at_1, &m.answer_at_3, &m.fact_at_1, &m.fact_at_3, &m.relation_at_1, &m.relation_at_3,
                    &m.source_accuracy}) {
    *v /= n;
  }
  return m;
}

std::vector<std::pair<Variant, Metrics>> ablate(std::span<const VariantModels> variants, const KbView& kb,
                                                const FeatureStore& features, std::span<const QAInstance> questions,
                                                const EvalOptions& options) {
  std::vector<std::pair<Variant, Metrics>> out;
  for (const auto& v : variants) out.emplace_back(v.variant, evaluate(v.models, kb, features, questions, options));
  return out;
}

std::string metrics_table(std::span<const std::pair<std::string, Metrics>> rows) {
  std::size_t label_width = 5;
  for (const auto& [label, m] : rows) label_width = std::max(label_width, label.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s %8s %8s %8s %8s %6s %7s\n", static_cast<int>(label_width), "split",
                "ans@1", "ans@3", "fact@1", "fact@3", "rel@1", "rel@3", "src@1", "n", "nofact");
  out += buf;
  for (const auto& [label, m] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f %6zu %7zu\n",
                  static_cast<int>(label_width), label.c_str(), 100 * m.answer_at_1, 100 * m.answer_at_3,
                  100 * m.fact_at_1, 100 * m.fact_at_3, 100 * m.relation_at_1, 100 * m.relation_at_3,
                  100 * m.source_accuracy, m.questions, m.no_fact);
    out += buf;
  }
  return out;
}

}  // namespace kbqa
