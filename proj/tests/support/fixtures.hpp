#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kbqa/dataio.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/synthetic.hpp"
#include "kbqa/trainer.hpp"

namespace kbqa::testing {

inline SyntheticConfig tiny_synthetic_config() {
  SyntheticConfig c;
  c.seed = 3;
  c.num_facts = 130;
  c.num_questions = 80;
  c.image_dim = 8;
  c.concept_dim = 64;
  c.word_dim = 6;
  return c;
}

inline ScorerDims tiny_scorer_dims(const SyntheticConfig& c) {
  ScorerDims d;
  d.image_dim = c.image_dim;
  d.image_proj = 4;
  d.embed_dim = 8;
  d.hidden_dim = 8;
  d.mlp1 = 12;
  d.mlp2 = 8;
  d.concept_dim = c.concept_dim;
  d.concept_proj = 8;
  d.output_dim = 2 * c.word_dim;
  return d;
}

// Embeds each image straight onto its groundtruth fact row, so ranking inside
// the right bucket is perfect. Keyed on the feature-store address of the image,
// which is stable for the life of the store.
class OracleEmbedder : public FactEmbedder {
 public:
  OracleEmbedder(const Dataset& data, const FactMatrix& facts) {
    for (const auto& q : data.instances) {
      const auto row = facts.row(*data.kb.index_of(q.fact_id));
      by_image_[data.features.features(q.image_id).data()] = {row.begin(), row.end()};
    }
  }
  std::vector<double> embed(const ScorerInput& input) const override { return by_image_.at(input.image.data()); }

 private:
  std::map<const double*, std::vector<double>> by_image_;
};

// Fresh, empty scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
#ifdef KBQA_TEST_TMP
  const std::filesystem::path root = KBQA_TEST_TMP;
#else
  const std::filesystem::path root = std::filesystem::temp_directory_path() / "kbqa_tests";
#endif
  const auto dir = root / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace kbqa::testing
