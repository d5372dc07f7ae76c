#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/synthetic.hpp"
#include "kbqa/trainer.hpp"

namespace kbqa {
namespace {

// max_j (L*[j != gt] + s_j) - s_gt, spelled out.
double reference_hinge(const std::vector<double>& s, std::size_t gt, double L) {
  double best = -1e300;
  for (std::size_t j = 0; j < s.size(); ++j) best = std::max(best, (j == gt ? 0.0 : L) + s[j]);
  return best - s[gt];
}

TEST(Hinge, MatchesReferenceAndIsNonNegative) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> s(1 + rng.index(12));
    for (double& v : s) v = rng.uniform(-1, 1);
    const std::size_t gt = rng.index(s.size());
    const double h = hinge_loss(s, gt, 1.0);
    EXPECT_DOUBLE_EQ(h, reference_hinge(s, gt, 1.0));
    EXPECT_GE(h, 0.0);
    Tape t(GradMode::kDisabled);
    EXPECT_DOUBLE_EQ(t.value(hinge(t.constant(Tensor::vector(s)), gt, 1.0)).item(), h);
  }
}

TEST(Hinge, ZeroExactlyWhenMarginsHold) {
  EXPECT_EQ(hinge_loss(std::vector<double>{0.9}, 0, 1.0), 0.0);
  EXPECT_EQ(hinge_loss(std::vector<double>{1.0, 0.0, -0.5}, 0, 1.0), 0.0);
  EXPECT_GT(hinge_loss(std::vector<double>{1.0, 0.01, -0.5}, 0, 1.0), 0.0);
  EXPECT_THROW(hinge_loss(std::vector<double>{1.0}, 1, 1.0), UsageError);
}

TEST(Hinge, SubgradientGoesToArgmaxAndGroundtruth) {
  Tensor s = Tensor::vector({0.2, 0.5, -0.1, 0.4});
  s.set_requires_grad(true);
  Tape t;
  t.backward(hinge(t.leaf(s), 2, 1.0));
  EXPECT_EQ(std::vector<double>(s.grad().begin(), s.grad().end()), (std::vector<double>{0, 1, -1, 0}));

  Tensor ok = Tensor::vector({2.0, 0.5});
  ok.set_requires_grad(true);
  Tape t2;
  t2.backward(hinge(t2.leaf(ok), 0, 1.0));
  EXPECT_EQ(ok.grad()[0], 0.0);
  EXPECT_EQ(ok.grad()[1], 0.0);
}

struct TinyWorld {
  SyntheticData synth = generate_synthetic(testing::tiny_synthetic_config());
  WordVectorTable table = synth.vector_table();
  FactMatrix facts{synth.dataset.kb, table};
  ScorerData data{synth.dataset.kb, facts, synth.dataset.features};
};

TEST(InitialDataset, SetsHaveNDistinctNegativesWithoutGroundtruth) {
  TinyWorld w;
  const auto& qs = w.synth.dataset.instances;
  const auto sets = build_initial_dataset(qs, w.synth.dataset.kb, 20, 5, &w.facts);
  ASSERT_EQ(sets.size(), qs.size());
  for (std::size_t k = 0; k < sets.size(); ++k) {
    EXPECT_EQ(sets[k].key, qs[k].question_id);
    EXPECT_EQ(w.synth.dataset.kb.fact(sets[k].groundtruth).id, qs[k].fact_id);
    EXPECT_EQ(sets[k].size(), 21u);
    EXPECT_EQ(sets[k].hard, 0u);
    const std::set<std::size_t> uniq(sets[k].negatives.begin(), sets[k].negatives.end());
    EXPECT_EQ(uniq.size(), 20u);
    EXPECT_FALSE(uniq.contains(sets[k].groundtruth));
  }
  const auto again = build_initial_dataset(qs, w.synth.dataset.kb, 20, 5, &w.facts);
  EXPECT_EQ(again[7].negatives, sets[7].negatives);
  const auto other = build_initial_dataset(qs, w.synth.dataset.kb, 20, 6, &w.facts);
  EXPECT_NE(other[7].negatives, sets[7].negatives);
}

TEST(InitialDataset, SmallKbGivesEverythingElse) {
  const KnowledgeBase kb({make_fact("a", "x", "IsA", "y"), make_fact("b", "x", "IsA", "z"), make_fact("c", "y", "IsA", "z")});
  QAInstance q;
  q.question_id = "q";
  q.fact_id = "b";
  const QAInstance qs[] = {q};
  const auto sets = build_initial_dataset(qs, kb, 99, 1);
  EXPECT_EQ(sets[0].negatives.size(), 2u);
  q.fact_id = "zz";
  const QAInstance bad[] = {q};
  EXPECT_THROW(build_initial_dataset(bad, kb, 5, 1), DataError);
  EXPECT_THROW(build_initial_dataset(qs, kb, 0, 1), UsageError);
}

TEST(InitialDataset, ZeroNormFactsAreNeverNegatives) {
  WordVectorTable t(1);
  t.set("x", std::vector<double>{1.0});
  const KnowledgeBase kb({make_fact("a", "x", "IsA", "x"), make_fact("b", "oov", "IsA", "oov"), make_fact("c", "x", "IsA", "x")});
  const FactMatrix m(kb, t);
  QAInstance q;
  q.fact_id = "a";
  const QAInstance qs[] = {q};
  const auto sets = build_initial_dataset(qs, kb, 5, 1, &m);
  EXPECT_EQ(sets[0].negatives, (std::vector<std::size_t>{2}));
}

TEST(Mining, TakesTopPooledThenRandomFill) {
  std::vector<Fact> facts;
  for (int i = 0; i < 10; ++i) facts.push_back(make_fact("f" + std::to_string(i), "s", "IsA", "o"));
  const KnowledgeBase kb(std::move(facts));
  std::vector<CandidateSet> current = {{"q1", "img", 0, {1, 2, 3, 4}, 0}, {"q2", "img", 5, {1, 2, 3, 4}, 0}};
  MiningState state;
  state.iteration = 1;
  state.seed = 42;
  state.pools = {{{3, 0.4}, {7, 0.9}, {2, 0.4}, {0, 5.0}, {9, 0.1}}, {}};
  const auto next = mine_hard_negatives(current, state, kb, 4);
  ASSERT_EQ(next.size(), 2u);
  // f* in the pool is ignored; equal scores fall back to fact index.
  EXPECT_EQ(next[0].negatives, (std::vector<std::size_t>{7, 2, 3, 9}));
  EXPECT_EQ(next[0].hard, 4u);
  EXPECT_EQ(next[1].hard, 0u);
  EXPECT_EQ(next[1].negatives.size(), 4u);
  EXPECT_EQ(std::count(next[1].negatives.begin(), next[1].negatives.end(), 5u), 0);
  EXPECT_EQ(state.empty_pool_fallbacks, 1u);

  state.pools = {{{3, 0.4}}, {}};
  const auto topped = mine_hard_negatives(current, state, kb, 4);
  EXPECT_EQ(topped[0].negatives.front(), 3u);
  EXPECT_EQ(topped[0].hard, 1u);
  const std::set<std::size_t> uniq(topped[0].negatives.begin(), topped[0].negatives.end());
  EXPECT_EQ(uniq.size(), 4u);
  EXPECT_FALSE(uniq.contains(0u));

  state.pools.pop_back();
  EXPECT_THROW(mine_hard_negatives(current, state, kb, 4), UsageError);
}

MarginConfig tiny_margin() {
  MarginConfig m;
  m.negatives = 20;
  m.iterations = 1;
  m.epochs = 2;
  m.mining_period = 1;
  m.batch_size = 16;
  m.learning_rate = 5e-3;
  m.seed = 9;
  return m;
}

TEST(TrainScorer, RecordsAndCandidateHistory) {
  TinyWorld w;
  const auto [train, heldout] = split_fold(w.synth.dataset.instances, 1);
  const auto cfg = testing::tiny_synthetic_config();
  std::size_t callbacks = 0;
  const auto r = train_scorer(train, heldout, w.data, testing::tiny_scorer_dims(cfg), Variant::kQuestionImageConcepts,
                              0.5, tiny_margin(), [&](const EpochRecord&) { ++callbacks; });
  EXPECT_EQ(callbacks, 4u);
  ASSERT_EQ(r.epochs.size(), 4u);
  ASSERT_EQ(r.iterations.size(), 2u);
  ASSERT_EQ(r.candidate_history.size(), 2u);
  for (const auto& sets : r.candidate_history) {
    ASSERT_EQ(sets.size(), train.size());
    for (std::size_t k = 0; k < sets.size(); ++k) {
      EXPECT_EQ(sets[k].size(), 21u);
      EXPECT_EQ(w.synth.dataset.kb.fact(sets[k].groundtruth).id, train[k].fact_id);
      EXPECT_EQ(std::count(sets[k].negatives.begin(), sets[k].negatives.end(), sets[k].groundtruth), 0);
    }
  }
  EXPECT_GT(r.iterations[0].pool_size, 0u);
  EXPECT_GT(r.iterations[1].hard_negatives, 0u);
  for (const auto& e : r.epochs) {
    EXPECT_GE(e.mean_loss, 0.0);
    EXPECT_GE(e.precision_at_3, e.precision_at_1);
  }
  const auto p = fact_precision(r.scorer, heldout, w.data);
  EXPECT_DOUBLE_EQ(p.at_1, r.epochs.back().precision_at_1);
}

TEST(TrainScorer, ThreadCountDoesNotChangeResults) {
  TinyWorld w;
  const auto [train, heldout] = split_fold(w.synth.dataset.instances, 2);
  const auto dims = testing::tiny_scorer_dims(testing::tiny_synthetic_config());
  auto m = tiny_margin();
  auto a = train_scorer(train, heldout, w.data, dims, Variant::kQuestionConcepts, 0.5, m);
  m.threads = 3;
  auto b = train_scorer(train, heldout, w.data, dims, Variant::kQuestionConcepts, 0.5, m);
  const auto pa = a.scorer.params(), pb = b.scorer.params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].tensor->values(), vb = pb[i].tensor->values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << pa[i].name;
  }
  for (std::size_t i = 0; i < a.epochs.size(); ++i) EXPECT_EQ(a.epochs[i].mean_loss, b.epochs[i].mean_loss);
}

TEST(TrainScorer, RejectsMismatchedOutputWidth) {
  TinyWorld w;
  auto dims = testing::tiny_scorer_dims(testing::tiny_synthetic_config());
  dims.output_dim += 1;
  EXPECT_THROW(train_scorer(w.synth.dataset.instances, {}, w.data, dims, Variant::kQuestionImage, 0.0, tiny_margin()),
               ShapeError);
  auto m = tiny_margin();
  m.task_loss = 0.0;
  EXPECT_THROW(m.validate(), UsageError);
  EXPECT_DOUBLE_EQ(tiny_margin().slack(), 1.0);
}

TEST(TrainScorer, MiningPeriodMustFitAnIteration) {
  auto m = tiny_margin();
  m.epochs = 4;
  m.mining_period = 5;
  EXPECT_THROW(m.validate(), UsageError);
  m.iterations = 0;
  EXPECT_NO_THROW(m.validate());
  m.iterations = 2;
  m.mining_period = 4;
  EXPECT_NO_THROW(m.validate());
}

}  // namespace
}  // namespace kbqa
