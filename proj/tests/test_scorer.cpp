#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "gradient_suite.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/scorer.hpp"

namespace kbqa {
namespace {

using testing::check_toy_chain;
using testing::make_toy_scorer;

// Exhaustive reference ranking written from scratch: sequential dot, sqrt
// norms, full sort by (score desc, id asc).
std::vector<std::pair<std::size_t, double>> brute_force_rank(const KnowledgeBase& kb, const FactMatrix& facts,
                                                             const std::vector<std::size_t>& cands,
                                                             const std::vector<double>& q) {
  auto dotp = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const double nq = std::sqrt(dotp(q, q));
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t c : cands) {
    const double nf = std::sqrt(dotp(facts.row(c), facts.row(c)));
    const double s = (nf == 0.0 || nq == 0.0) ? -INFINITY : dotp(facts.row(c), q) / (nf * nq);
    out.emplace_back(c, s);
  }
  std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return kb.fact(a.first).id < kb.fact(b.first).id;
  });
  return out;
}

struct RandomKb {
  KnowledgeBase kb;
  WordVectorTable table{3};
  FactMatrix facts;
};

RandomKb random_kb(Rng& rng, std::size_t n) {
  RandomKb r;
  // Small integer vectors make exact score ties common.
  const char* words[] = {"a", "b", "c", "d", "e"};
  for (const char* w : words) {
    std::vector<double> v(3);
    for (double& x : v) x = static_cast<double>(static_cast<int>(rng.index(5)) - 2);
    r.table.set(w, v);
  }
  std::vector<Fact> facts;
  for (std::size_t i = 0; i < n; ++i) {
    // Ids deliberately out of load order.
    const std::string id = "f" + std::to_string((i * 7919) % 100003);
    facts.push_back(make_fact(id, words[rng.index(5)], "IsA", std::string(words[rng.index(5)]) + " " + words[rng.index(5)]));
  }
  r.kb = KnowledgeBase(std::move(facts));
  r.facts = FactMatrix(r.kb, r.table);
  return r;
}

TEST(Ranking, MatchesExhaustiveSortWithTies) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = random_kb(rng, 60 + rng.index(100));
    std::vector<std::size_t> cands;
    for (std::size_t i = 0; i < r.kb.size(); ++i) {
      if (rng.bernoulli(0.7)) cands.push_back(i);
    }
    if (cands.empty()) cands.push_back(0);
    rng.shuffle(cands);
    std::vector<double> q(6);
    for (double& x : q) x = static_cast<double>(static_cast<int>(rng.index(3)) - 1);
    if (std::all_of(q.begin(), q.end(), [](double v) { return v == 0.0; })) q[0] = 1.0;
    const auto want = brute_force_rank(r.kb, r.facts, cands, q);
    const auto got = rank_candidates(r.kb, r.facts, cands, q, cands.size());
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      ASSERT_EQ(got[i].index, want[i].first) << "trial " << trial << " rank " << i;
      ASSERT_EQ(got[i].score, want[i].second);
    }
    const auto top3 = rank_candidates(r.kb, r.facts, cands, q, 3);
    ASSERT_EQ(top3.size(), std::min<std::size_t>(3, cands.size()));
    for (std::size_t i = 0; i < top3.size(); ++i) EXPECT_EQ(top3[i].index, want[i].first);
  }
}

TEST(Ranking, RandomTieBreakIsSeededAndOrderFree) {
  Rng rng(3);
  auto r = random_kb(rng, 80);
  std::vector<std::size_t> cands(r.kb.size());
  for (std::size_t i = 0; i < cands.size(); ++i) cands[i] = i;
  const std::vector<double> q = {1, 0, 0, 0, 0, 0};
  Rng t1(5), t2(5);
  const auto a = rank_candidates(r.kb, r.facts, cands, q, cands.size(), {&t1});
  std::reverse(cands.begin(), cands.end());
  const auto b = rank_candidates(r.kb, r.facts, cands, q, cands.size(), {&t2});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].index, b[i].index);
    if (i) EXPECT_GE(a[i - 1].score, a[i].score);
  }
}

TEST(Ranking, ZeroNormFactsRankLast) {
  WordVectorTable t(1);
  t.set("x", std::vector<double>{1.0});
  const KnowledgeBase kb({make_fact("f1", "zz", "IsA", "zz"), make_fact("f2", "x", "IsA", "x")});
  const FactMatrix m(kb, t);
  const std::vector<std::size_t> cands = {0, 1};
  const std::vector<double> q = {1.0, 1.0};
  const auto got = rank_candidates(kb, m, cands, q, 2);
  EXPECT_EQ(got[0].index, 1u);
  EXPECT_EQ(got[1].score, kExcludedScore);
  EXPECT_THROW(rank_candidates(kb, m, {}, q, 2), UsageError);
  EXPECT_THROW(rank_candidates(kb, m, cands, std::vector<double>{1.0}, 2), ShapeError);
}

TEST(Ranking, BatchScoresAgreeWithPerFactScore) {
  Rng rng(8);
  auto r = random_kb(rng, 50);
  std::vector<std::size_t> cands(r.kb.size());
  for (std::size_t i = 0; i < cands.size(); ++i) cands[i] = i;
  const std::vector<double> q = {0.3, -1.2, 0.5, 2.0, 0.1, -0.4};
  const auto batch = batch_scores(r.facts, cands, q);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double s = score(r.facts.row(i), q);
    if (s == kExcludedScore) {
      EXPECT_EQ(batch[i], kExcludedScore);
    } else {
      EXPECT_NEAR(batch[i], s, 1e-12);
    }
  }
}

TEST(Score, IsCosine) {
  const std::vector<double> a = {1, 2, 2}, b = {2, 0, 0};
  EXPECT_DOUBLE_EQ(score(a, b), 2.0 / (3.0 * 2.0));
  EXPECT_EQ(score(a, std::vector<double>{0, 0, 0}), kExcludedScore);
  EXPECT_THROW(score(a, std::vector<double>{1}), ShapeError);
}

TEST(Scorer, ChainGradientsMatchFiniteDifferences) {
  for (auto [variant, drop, seed] : {std::tuple{Variant::kQuestionImageConcepts, 0.0, 1},
                                     std::tuple{Variant::kQuestionImage, 0.0, 2},
                                     std::tuple{Variant::kQuestionConcepts, 0.5, 3}}) {
    const auto r = check_toy_chain(variant, drop, static_cast<std::uint64_t>(seed));
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(variant) << ": " << r.worst;
  }
}

TEST(Scorer, MaskedInputsDoNotMatter) {
  auto c = make_toy_scorer(Variant::kQuestionConcepts, 0.0, 5);
  const auto base = c.scorer.embed({c.images[0], c.concepts[0], c.questions[0]});
  std::vector<double> other_image(5, 9.0);
  EXPECT_EQ(c.scorer.embed({other_image, c.concepts[0], c.questions[0]}), base);
  std::vector<double> other_concepts(6, 1.0);
  EXPECT_NE(c.scorer.embed({c.images[0], other_concepts, c.questions[0]}), base);

  auto d = make_toy_scorer(Variant::kQuestionImage, 0.0, 5);
  const auto base_i = d.scorer.embed({d.images[0], d.concepts[0], d.questions[0]});
  EXPECT_EQ(d.scorer.embed({d.images[0], other_concepts, d.questions[0]}), base_i);
}

TEST(Scorer, EmbedBatchMatchesSingleEmbed) {
  auto c = make_toy_scorer(Variant::kQuestionImageConcepts, 0.5, 6);
  std::vector<Scorer::Encoded> batch;
  for (std::size_t i = 0; i < 3; ++i) batch.push_back(c.scorer.encode({c.images[i], c.concepts[i], c.questions[i]}));
  const auto rows = c.scorer.embed_batch(batch);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto single = c.scorer.embed({c.images[i], c.concepts[i], c.questions[i]});
    ASSERT_EQ(rows[i].size(), 4u);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(rows[i][j], single[j], 1e-14);
  }
}

TEST(Scorer, InputValidation) {
  auto c = make_toy_scorer(Variant::kQuestionImageConcepts, 0.0, 7);
  std::vector<double> short_image(4);
  EXPECT_THROW(c.scorer.embed({short_image, c.concepts[0], "cup"}), ShapeError);
  EXPECT_THROW(c.scorer.embed({c.images[0], c.concepts[0], "?!"}), UsageError);
  auto dims = testing::toy_dims();
  dims.mlp1 = 0;
  EXPECT_THROW(Scorer(dims, Vocabulary()), UsageError);
  EXPECT_THROW(Scorer(testing::toy_dims(), Vocabulary(), Variant::kQuestionImage, 1.0), UsageError);
}

TEST(Scorer, VariantNames) {
  for (Variant v : {Variant::kQuestionImage, Variant::kQuestionConcepts, Variant::kQuestionImageConcepts}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_FALSE(parse_variant("Q").has_value());
}

}  // namespace
}  // namespace kbqa
