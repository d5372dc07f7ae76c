#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kbqa/dataio.hpp"
#include "kbqa/kb.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

// Desk-scale stand-in for the real corpus. Each question carries a relation
// keyword, a source cue ("which" asks for the visual subject, "what" for the
// KB object) and either the fact's object or its subject words. The subject's
// concept bit is hot in the image's concept vector, so the planted fact is
// recoverable by exhaustive search.
struct SyntheticConfig {
  std::uint64_t seed = 7;
  std::size_t num_facts = 600;
  std::size_t num_questions = 1000;
  // Subjects are "<adjective> <noun>" pairs.
  std::size_t subject_adjectives = 7;
  std::size_t subject_nouns = 7;
  // Each relation draws its objects from its own small token pool.
  std::size_t object_tokens_per_relation = 2;
  std::size_t filler_tokens = 5;
  // Probability that the groundtruth subject's concept bit is hot.
  double concept_signal = 1.0;
  // Other subjects whose concept bit is also hot; never share the planted
  // fact's (relation, object).
  std::size_t concept_distractors = 0;
  std::size_t concept_noise_bits = 3;
  // Fraction of questions whose answer is the visual subject.
  double image_source_fraction = 0.5;
  std::size_t image_dim = 2048;
  std::size_t concept_dim = 1176;
  std::size_t word_dim = 100;

  void validate() const;
};

struct SyntheticData {
  Dataset dataset;
  // Word vectors in file order.
  std::vector<std::pair<std::string, std::vector<double>>> word_vectors;
  // Distinct question tokens, sorted.
  std::vector<std::string> question_vocabulary;

  WordVectorTable vector_table() const;
};

struct SyntheticFiles {
  std::string kb = "kb.tsv";
  std::string qa = "qa.jsonl";
  std::string features = "features.txt";
  std::string concepts = "concepts.txt";
  std::string concept_labels = "concept_labels.txt";
  std::string vectors = "vectors.txt";

  // Paths joined onto `dir`.
  static SyntheticFiles in(const std::string& dir);
  DatasetPaths dataset_paths() const;
};

SyntheticData generate_synthetic(const SyntheticConfig& config);
// Writes the six fixture files atomically and returns their paths.
SyntheticFiles write_synthetic(const SyntheticData& data, const std::string& dir);

// Relation keyword planted in synthetic questions.
const std::string& relation_keyword(Relation r);

}  // namespace kbqa
