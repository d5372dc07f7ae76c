#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "kbqa/dataio.hpp"
#include "kbqa/errors.hpp"
#include "kbqa/pipeline.hpp"
#include "kbqa/synthetic.hpp"

namespace kbqa {
namespace {

const char* kQaLine =
    R"({"question_id":"q1","image_id":"img1","question":"Which animal climbs?","answer":"cat","fact_id":"f1",)"
    R"("relation":"CapableOf","answer_source":"Image","fold":2})";

TEST(Qa, ParsesRecords) {
  std::istringstream in(std::string(kQaLine) + "\n\n");
  const auto qs = parse_qa(in);
  ASSERT_EQ(qs.size(), 1u);
  EXPECT_EQ(qs[0].question, "Which animal climbs?");
  EXPECT_EQ(qs[0].relation, Relation::kCapableOf);
  EXPECT_EQ(qs[0].source, AnswerSource::kImage);
  EXPECT_EQ(qs[0].fold, 2);
  std::ostringstream out;
  write_qa(out, qs);
  std::istringstream back(out.str());
  const auto again = parse_qa(back);
  EXPECT_EQ(again[0].question_id, "q1");
  EXPECT_EQ(again[0].fact_id, "f1");
  EXPECT_EQ(qa_to_json_line(again[0]), qa_to_json_line(qs[0]));
}

std::size_t qa_error_line(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_qa(in, "qa.jsonl");
  } catch (const LoadError& e) {
    return e.line();
  }
  return 0;
}

TEST(Qa, ErrorsCarryLineNumbers) {
  const std::string good = std::string(kQaLine) + "\n";
  EXPECT_EQ(qa_error_line(good + "{not json\n"), 2u);
  EXPECT_EQ(qa_error_line(good + good), 2u);
  EXPECT_EQ(qa_error_line(R"({"question_id":"q"})"), 1u);
  std::string bad_rel = kQaLine;
  bad_rel.replace(bad_rel.find("CapableOf"), 9, "Likes");
  EXPECT_EQ(qa_error_line(bad_rel), 1u);
  std::string bad_fold = kQaLine;
  bad_fold.replace(bad_fold.find("\"fold\":2"), 8, "\"fold\":\"2\"");
  EXPECT_EQ(qa_error_line(bad_fold), 1u);
}

TEST(Features, LoadAndValidate) {
  FeatureStore store(0, 4);
  std::istringstream f("img1 3 0.5 -1 2\nimg2 3 0 0 0\n");
  load_image_features(store, f);
  EXPECT_EQ(store.image_dim(), 3u);
  EXPECT_EQ(store.features("img1")[2], 2.0);
  std::istringstream c("img1 0,3\nimg2\n");
  load_image_concepts(store, c);
  EXPECT_EQ(std::vector<double>(store.concepts("img1").begin(), store.concepts("img1").end()),
            (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(store.hot_concepts("img1"), (std::vector<std::uint32_t>{0, 3}));
  EXPECT_TRUE(store.hot_concepts("img2").empty());
  EXPECT_EQ(store.image_ids(), (std::vector<std::string>{"img1", "img2"}));
  EXPECT_THROW(store.features("img3"), DataError);

  FeatureStore other(0, 4);
  std::istringstream wrong_count("img1 3 1 2\n");
  EXPECT_THROW(load_image_features(other, wrong_count), LoadError);
  std::istringstream out_of_range("img1 4\n");
  EXPECT_THROW(load_image_concepts(other, out_of_range), LoadError);
  std::istringstream dup("a 1 1\na 1 2\n");
  EXPECT_THROW(load_image_features(other, dup), LoadError);
}

TEST(Split, PartitionsByFold) {
  std::vector<QAInstance> qs(10);
  for (int i = 0; i < 10; ++i) qs[i].fold = i % 5 + 1;
  const auto [train, test] = split_fold(qs, 3);
  EXPECT_EQ(train.size(), 8u);
  EXPECT_EQ(test.size(), 2u);
  for (const auto& q : test) EXPECT_EQ(q.fold, 3);
  EXPECT_THROW(split_fold(qs, 0), UsageError);
  EXPECT_THROW(split_fold(qs, 6), UsageError);
}

TEST(Synthetic, HasRequestedShape) {
  const auto d = generate_synthetic(SyntheticConfig{});
  EXPECT_EQ(d.dataset.kb.size(), 600u);
  EXPECT_EQ(d.dataset.instances.size(), 1000u);
  for (Relation r : all_relations()) EXPECT_GE(d.dataset.kb.bucket(r).size(), 46u);
  EXPECT_LE(d.question_vocabulary.size(), 70u);
  EXPECT_GE(d.question_vocabulary.size(), 50u);
  std::set<int> folds;
  std::size_t image = 0;
  for (const auto& q : d.dataset.instances) {
    folds.insert(q.fold);
    image += q.source == AnswerSource::kImage;
    const Fact& f = d.dataset.kb.at(q.fact_id);
    EXPECT_EQ(f.relation, q.relation);
    EXPECT_EQ(extract_answer(f, q.source), q.answer);
    EXPECT_NE(q.question.find(relation_keyword(q.relation)), std::string::npos) << q.question;
  }
  EXPECT_EQ(folds.size(), 5u);
  EXPECT_GT(image, 400u);
  EXPECT_LT(image, 600u);
  EXPECT_EQ(d.dataset.answer_mismatches, 0u);
}

TEST(Synthetic, PlantedSubjectConceptIsHot) {
  const auto d = generate_synthetic(testing::tiny_synthetic_config());
  for (const auto& q : d.dataset.instances) {
    const auto hot = d.dataset.features.hot_concepts(q.image_id);
    ASSERT_FALSE(hot.empty());
    const auto& subject = d.dataset.kb.at(q.fact_id).subject;
    EXPECT_EQ(d.dataset.concept_labels.at(hot.front()), subject) << q.question_id;
  }
}

TEST(Synthetic, SameSeedSameData) {
  const auto a = generate_synthetic(testing::tiny_synthetic_config());
  const auto b = generate_synthetic(testing::tiny_synthetic_config());
  std::ostringstream sa, sb;
  write_qa(sa, a.dataset.instances);
  write_qa(sb, b.dataset.instances);
  EXPECT_EQ(sa.str(), sb.str());
  auto c = testing::tiny_synthetic_config();
  c.seed += 1;
  std::ostringstream sc;
  write_qa(sc, generate_synthetic(c).dataset.instances);
  EXPECT_NE(sa.str(), sc.str());
}

TEST(Synthetic, FilesRoundTripExactly) {
  const auto dir = testing::scratch_dir("synthetic_roundtrip");
  const auto d = generate_synthetic(testing::tiny_synthetic_config());
  auto files = write_synthetic(d, dir);
  auto paths = files.dataset_paths();
  const Dataset loaded = load_dataset(paths);
  ASSERT_EQ(loaded.kb.size(), d.dataset.kb.size());
  ASSERT_EQ(loaded.instances.size(), d.dataset.instances.size());
  for (const auto& q : d.dataset.instances) {
    const auto a = d.dataset.features.features(q.image_id);
    const auto b = loaded.features.features(q.image_id);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
    EXPECT_EQ(d.dataset.features.hot_concepts(q.image_id), loaded.features.hot_concepts(q.image_id));
  }
  const auto vectors = load_vectors(files.vectors, testing::tiny_synthetic_config().word_dim);
  for (const auto& [tok, vec] : d.word_vectors) {
    ASSERT_TRUE(std::equal(vec.begin(), vec.end(), vectors.find(tok)));
  }

  // Cache: first load writes it, second reads it back identically.
  paths.feature_cache = dir + "/features.cache";
  const Dataset cached1 = load_dataset(paths);
  ASSERT_TRUE(std::filesystem::exists(paths.feature_cache));
  const Dataset cached2 = load_dataset(paths);
  const auto id = d.dataset.instances.front().image_id;
  const auto x = cached2.features.features(id), y = loaded.features.features(id);
  EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
  EXPECT_EQ(cached1.features.hot_concepts(id), cached2.features.hot_concepts(id));
}

TEST(Dataset, ValidationCatchesBrokenReferences) {
  auto d = generate_synthetic(testing::tiny_synthetic_config()).dataset;
  auto broken = d;
  broken.instances[0].fact_id = "missing";
  EXPECT_THROW(validate_dataset(broken), DataError);
  broken = d;
  broken.instances[0].relation = broken.instances[0].relation == Relation::kIsA ? Relation::kHasA : Relation::kIsA;
  EXPECT_THROW(validate_dataset(broken), DataError);
  broken = d;
  broken.instances[0].fold = 6;
  EXPECT_THROW(validate_dataset(broken), DataError);
  broken = d;
  broken.instances[0].image_id = "nowhere";
  EXPECT_THROW(validate_dataset(broken), DataError);
  broken = d;
  broken.instances[0].answer = "something else";
  validate_dataset(broken);
  EXPECT_EQ(broken.answer_mismatches, 1u);
}

TEST(Synthetic, RejectsImpossibleConfig) {
  SyntheticConfig c;
  c.num_facts = 13 * 50;
  EXPECT_THROW(c.validate(), UsageError);
  c = SyntheticConfig{};
  c.concept_dim = 10;
  EXPECT_THROW(c.validate(), UsageError);
}

}  // namespace
}  // namespace kbqa
