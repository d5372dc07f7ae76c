#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kbqa/encoders.hpp"
#include "kbqa/kb.hpp"

namespace kbqa {

inline constexpr int kNumFolds = 5;

struct QAInstance {
  std::string question_id;
  std::string image_id;
  std::string question;
  std::string answer;
  std::string fact_id;
  Relation relation = Relation::kCategory;
  AnswerSource source = AnswerSource::kImage;
  int fold = 1;
};

// Precomputed per-image inputs: CNN feature vector and multi-hot concepts.
class FeatureStore {
 public:
  FeatureStore() = default;
  FeatureStore(std::size_t image_dim, std::size_t concept_dim) : image_dim_(image_dim), concept_dim_(concept_dim) {}

  std::size_t image_dim() const { return image_dim_; }
  std::size_t concept_dim() const { return concept_dim_; }
  std::size_t size() const { return features_.size(); }

  void set_features(const std::string& image_id, std::vector<double> values);
  void set_concepts(const std::string& image_id, std::span<const std::uint32_t> hot);

  bool has_features(const std::string& image_id) const { return features_.contains(image_id); }
  bool has_concepts(const std::string& image_id) const { return concepts_.contains(image_id); }
  std::span<const double> features(const std::string& image_id) const;
  std::span<const double> concepts(const std::string& image_id) const;
  std::vector<std::uint32_t> hot_concepts(const std::string& image_id) const;

  // Image ids in sorted order.
  std::vector<std::string> image_ids() const;

 private:
  std::size_t image_dim_ = 0;
  std::size_t concept_dim_ = 0;
  std::map<std::string, std::vector<double>> features_;
  std::map<std::string, std::vector<double>> concepts_;
};

struct Dataset {
  KnowledgeBase kb;
  std::vector<QAInstance> instances;
  FeatureStore features;
  std::vector<std::string> concept_labels;
  // Instances whose stored answer differs from the answer implied by their
  // fact and source. Counted, not fatal: released data has surface variants.
  std::size_t answer_mismatches = 0;
};

struct DatasetPaths {
  std::string kb;
  std::string qa;
  std::string features;
  std::string concepts;
  std::string concept_labels;
  // Optional packed binary cache of features+concepts; rebuilt when stale.
  std::string feature_cache;
};

std::vector<QAInstance> parse_qa(std::istream& in, const std::string& source = "<stream>");
std::vector<QAInstance> load_qa(const std::string& path);
std::string qa_to_json_line(const QAInstance& q);
void write_qa(std::ostream& out, std::span<const QAInstance> instances);

std::vector<std::string> load_concept_labels(const std::string& path);
// `image_id <dim> v1 ... v_dim` per line.
void load_image_features(FeatureStore& store, std::istream& in, const std::string& source = "<stream>");
// `image_id i1,i2,...` per line with zero-based indices.
void load_image_concepts(FeatureStore& store, std::istream& in, const std::string& source = "<stream>");
FeatureStore load_feature_store(const std::string& features_path, const std::string& concepts_path,
                                std::size_t concept_dim, const std::string& cache_path = "");

// Loads every file and checks referential integrity; throws DataError naming
// the offending ids.
Dataset load_dataset(const DatasetPaths& paths);
void validate_dataset(Dataset& data);

// Test split = instances tagged `fold`; train = the rest.
std::pair<std::vector<QAInstance>, std::vector<QAInstance>> split_fold(std::span<const QAInstance> data, int fold);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace kbqa
