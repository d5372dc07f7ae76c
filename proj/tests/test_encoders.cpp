#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "kbqa/encoders.hpp"
#include "kbqa/errors.hpp"

namespace kbqa {
namespace {

using testing::grad_check;
using testing::random_projection;

// Plain scalar-loop LSTM cell, gates i f g o, written independently of the
// tape ops.
std::vector<double> reference_lstm(const LstmParams& p, const std::vector<std::size_t>& ids) {
  const std::size_t d = p.input_dim, h = p.hidden_dim;
  std::vector<double> hs(h, 0.0), cs(h, 0.0);
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  for (std::size_t tok : ids) {
    std::vector<double> x(d + h);
    for (std::size_t k = 0; k < d; ++k) x[k] = p.embedding.at(tok, k);
    for (std::size_t k = 0; k < h; ++k) x[d + k] = hs[k];
    std::vector<double> z(4 * h);
    for (std::size_t j = 0; j < 4 * h; ++j) {
      z[j] = p.bias[j];
      for (std::size_t k = 0; k < d + h; ++k) z[j] += x[k] * p.weights.at(k, j);
    }
    for (std::size_t j = 0; j < h; ++j) {
      cs[j] = sig(z[h + j]) * cs[j] + sig(z[j]) * std::tanh(z[2 * h + j]);
      hs[j] = sig(z[3 * h + j]) * std::tanh(cs[j]);
    }
  }
  return hs;
}

LstmParams small_lstm(std::uint64_t seed, std::size_t vocab = 6, std::size_t in = 4, std::size_t hidden = 5) {
  LstmParams p(vocab, in, hidden);
  Rng rng(seed);
  p.init(rng, 0.5);
  // Non-trivial bias so every gate path is exercised.
  for (double& b : p.bias.values()) b += rng.uniform(-0.3, 0.3);
  return p;
}

TEST(Vocabulary, BuildsInFirstAppearanceOrder) {
  const std::vector<std::string> qs = {"What is this", "what IS that?"};
  const auto v = Vocabulary::build(qs);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<pad>", "<unk>", "what", "is", "this", "that"}));
  EXPECT_EQ(v.index("that"), 5u);
  EXPECT_EQ(v.index("dog"), Vocabulary::kUnk);
  const auto e = v.encode("this dog");
  EXPECT_EQ(e.ids, (std::vector<std::size_t>{4, Vocabulary::kUnk}));
  EXPECT_FALSE(e.truncated);
}

TEST(Vocabulary, TruncatesLongQuestions) {
  std::string q;
  for (int i = 0; i < 40; ++i) q += "w ";
  const auto e = Vocabulary().encode(q);
  EXPECT_EQ(e.ids.size(), kMaxQuestionTokens);
  EXPECT_TRUE(e.truncated);
}

TEST(Vocabulary, TokenListRoundTripAndHash) {
  const std::vector<std::string> qs = {"a b c"};
  const auto v = Vocabulary::build(qs);
  const auto w = Vocabulary::from_tokens(v.tokens());
  EXPECT_EQ(w.hash(), v.hash());
  EXPECT_NE(Vocabulary().hash(), v.hash());
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b"}), DataError);
  EXPECT_THROW(Vocabulary::from_tokens({"<pad>", "<unk>", "a", "a"}), DataError);
}

TEST(Lstm, InitSetsForgetBiasToOne) {
  LstmParams p(3, 2, 4);
  Rng rng(1);
  p.init(rng);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(p.bias[j], (j >= 4 && j < 8) ? 1.0 : 0.0);
  for (double w : p.weights.values()) EXPECT_LE(std::abs(w), 0.08);
}

TEST(Lstm, MatchesScalarReference) {
  const auto p = small_lstm(3);
  const std::vector<std::size_t> ids = {2, 5, 1, 3};
  const auto got = lstm_forward(p, ids);
  const auto want = reference_lstm(p, ids);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-14);
}

TEST(Lstm, PaddingDoesNotLeakAcrossRows) {
  const auto p = small_lstm(4);
  const std::vector<std::vector<std::size_t>> batch = {{2, 3}, {4, 1, 5, 2, 2}, {3}};
  Tape t(GradMode::kDisabled);
  const Tensor& h = t.value(lstm_encode(t, p, batch, Mode::kEval));
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto alone = reference_lstm(p, batch[r]);
    for (std::size_t j = 0; j < p.hidden_dim; ++j) EXPECT_NEAR(h.at(r, j), alone[j], 1e-14);
  }
}

TEST(Lstm, GradientsMatchFiniteDifferences) {
  auto p = small_lstm(5, 6, 3, 4);
  const std::vector<std::vector<std::size_t>> batch = {{1, 2, 3}, {4, 5}};
  auto r = grad_check({{"embedding", &p.embedding}, {"weights", &p.weights}, {"bias", &p.bias}},
                      [&](Tape& t) { return random_projection(t, lstm_encode(t, p, batch, Mode::kEval)); });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Lstm, GradientsWithDropoutMatchFiniteDifferences) {
  auto p = small_lstm(6, 5, 3, 8);
  const std::vector<std::vector<std::size_t>> batch = {{1, 2, 4}, {3}};
  auto r = grad_check({{"embedding", &p.embedding}, {"weights", &p.weights}, {"bias", &p.bias}}, [&](Tape& t) {
    Rng rng(11);
    return random_projection(t, lstm_encode(t, p, batch, Mode::kTrain, &rng, {0.3, 0.3}));
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Lstm, RejectsEmptyInput) {
  const auto p = small_lstm(1);
  Tape t;
  const std::vector<std::vector<std::size_t>> empty_row = {{1}, {}};
  EXPECT_THROW(lstm_encode(t, p, empty_row, Mode::kEval), UsageError);
  EXPECT_THROW(lstm_encode(t, p, {}, Mode::kEval), UsageError);
  const std::vector<std::vector<std::size_t>> ok = {{1}};
  EXPECT_THROW(lstm_encode(t, p, ok, Mode::kTrain, nullptr, {0.5, 0.0}), UsageError);
}

TEST(Classifier, LogitGradients) {
  const std::vector<std::string> qs = {"a b c", "d e"};
  QuestionClassifier net(Vocabulary::build(qs), 3, 4, 5, {});
  Rng rng(2);
  net.init(rng, 0.5);
  std::vector<testing::NamedParam> params;
  for (auto& p : net.params()) params.push_back({p.name, p.tensor});
  const std::vector<std::vector<std::size_t>> batch = {{2, 3, 4}, {5, 6}};
  const std::vector<std::size_t> labels = {1, 4};
  auto r = grad_check(params, [&](Tape& t) { return softmax_cross_entropy(net.logits(t, batch, Mode::kEval, nullptr), labels); });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Classifier, LearnsKeywordRelations) {
  std::vector<std::pair<std::string, Relation>> data;
  const char* fill[] = {"the", "a", "this", "that"};
  for (int i = 0; i < 80; ++i) {
    const std::string f = fill[i % 4];
    data.push_back({"which " + f + " thing is used here", Relation::kUsedFor});
    data.push_back({"what " + f + " thing is located here", Relation::kAtLocation});
    data.push_back({f + " thing part of what", Relation::kPartOf});
  }
  ClassifierConfig cfg;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 16;
  cfg.dropout = {0.1, 0.1};
  cfg.epochs = 15;
  cfg.batch_size = 20;
  cfg.learning_rate = 1e-2;
  const auto trained = train_relation_classifier(data, cfg);
  ASSERT_EQ(trained.trace.epoch_loss.size(), 15u);
  EXPECT_LT(trained.trace.epoch_loss.back(), trained.trace.epoch_loss.front());
  const auto pred = trained.model.predict("which thing is used there");
  EXPECT_EQ(pred.front().first, Relation::kUsedFor);
  EXPECT_EQ(pred.size(), kNumRelations);
  double total = 0.0;
  for (const auto& [r, p] : pred) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(trained.model.predict("what thing is located here").front().first, Relation::kAtLocation);
}

TEST(Classifier, LearnsSourceCue) {
  std::vector<std::pair<std::string, AnswerSource>> data;
  for (int i = 0; i < 60; ++i) {
    data.push_back({"which object is red", AnswerSource::kImage});
    data.push_back({"what is red used for", AnswerSource::kKnowledgeBase});
  }
  ClassifierConfig cfg = ClassifierConfig::source_defaults();
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.dropout = {0.0, 0.0};
  cfg.epochs = 10;
  cfg.batch_size = 20;
  cfg.learning_rate = 1e-2;
  const auto trained = train_source_classifier(data, cfg);
  EXPECT_EQ(trained.model.predict("which object is red").first, AnswerSource::kImage);
  EXPECT_EQ(trained.model.predict("what is red used for").first, AnswerSource::kKnowledgeBase);
  EXPECT_GT(trained.trace.epoch_accuracy.back(), 0.99);
}

TEST(Classifier, SameSeedSameWeights) {
  std::vector<std::pair<std::string, AnswerSource>> data = {{"a b", AnswerSource::kImage},
                                                            {"c d", AnswerSource::kKnowledgeBase}};
  ClassifierConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 4;
  cfg.epochs = 3;
  auto a = train_source_classifier(data, cfg);
  auto b = train_source_classifier(data, cfg);
  const auto pa = a.model.net().params(), pb = b.model.net().params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].tensor->values(), vb = pb[i].tensor->values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << pa[i].name;
  }
}

TEST(Sources, ParseNames) {
  EXPECT_EQ(parse_source("Image"), AnswerSource::kImage);
  EXPECT_EQ(parse_source("KB"), AnswerSource::kKnowledgeBase);
  EXPECT_FALSE(parse_source("web").has_value());
  EXPECT_EQ(parse_source(to_string(AnswerSource::kKnowledgeBase)), AnswerSource::kKnowledgeBase);
}

}  // namespace
}  // namespace kbqa
