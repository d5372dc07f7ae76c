#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kbqa/autodiff.hpp"
#include "kbqa/dataio.hpp"
#include "kbqa/kb.hpp"
#include "kbqa/scorer.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

struct MarginConfig {
  double task_loss = 1.0;      // L
  double regularizer = 1e-4;   // C, decoupled decay on weight matrices
  std::size_t negatives = 99;  // N
  std::size_t iterations = 2;  // T
  std::size_t epochs = 50;     // per mining iteration
  std::size_t mining_period = 10;
  // A wrong fact enters the pool when S(f) > S(f*) - mining_slack at a mining
  // epoch. Negative means "use task_loss", i.e. every margin violator.
  double mining_slack = -1.0;
  std::size_t batch_size = 100;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  double init_scale = 0.08;
  std::uint64_t seed = 1;
  // Start every iteration from fresh weights instead of continuing.
  bool reinitialize = false;
  std::size_t threads = 1;

  void validate() const;
  double slack() const { return mining_slack < 0.0 ? task_loss : mining_slack; }
};

struct CandidateSet {
  std::string key;       // question id
  std::string image_id;
  std::size_t groundtruth = 0;          // fact index of f*
  std::vector<std::size_t> negatives;   // fact indices, distinct, never f*
  std::size_t hard = 0;                 // negatives that came from a pool

  std::size_t size() const { return negatives.size() + 1; }
};

struct MiningState {
  std::size_t iteration = 0;
  // Per key: fact index -> highest score recorded at a mining epoch.
  std::vector<std::map<std::size_t, double>> pools;
  std::uint64_t seed = 0;
  std::size_t empty_pool_fallbacks = 0;

  std::size_t pool_size() const;
};

// max over candidates of (L*[f != f*] + S(f)) minus S(f*). Zero for a set
// holding only f*.
double hinge_loss(std::span<const double> scores, std::size_t gt_index, double task_loss);
// Tape op over a score vector; the subgradient goes to the argmax (first on
// ties) and to f*.
Var hinge(Var scores, std::size_t gt_index, double task_loss);

std::vector<CandidateSet> build_initial_dataset(std::span<const QAInstance> instances, const KnowledgeBase& kb,
                                                std::size_t negatives, std::uint64_t seed,
                                                const FactMatrix* facts = nullptr);

// Next candidate sets: per key the top-N pooled facts by recorded score
// (ties by fact index), topped up with uniform random negatives.
std::vector<CandidateSet> mine_hard_negatives(std::span<const CandidateSet> current, MiningState& state,
                                              const KnowledgeBase& kb, std::size_t negatives,
                                              const FactMatrix* facts = nullptr);

struct EpochRecord {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double precision_at_1 = 0.0;
  double precision_at_3 = 0.0;
  std::size_t pool_size = 0;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t candidate_sets = 0;
  std::size_t hard_negatives = 0;   // pooled negatives inside D(t)
  std::size_t pool_size = 0;        // pooled facts captured while training on D(t)
  double final_loss = 0.0;
  double precision_at_1 = 0.0;
  double precision_at_3 = 0.0;
};

struct TrainScorerResult {
  Scorer scorer;
  std::vector<EpochRecord> epochs;
  std::vector<IterationRecord> iterations;
  // D(0) .. D(T).
  std::vector<std::vector<CandidateSet>> candidate_history;
};

struct ScorerData {
  const KnowledgeBase& kb;
  const FactMatrix& facts;
  const FeatureStore& features;
};

// Fact precision@1/@3 ranking inside the groundtruth relation's bucket.
struct PrecisionAtK {
  double at_1 = 0.0;
  double at_3 = 0.0;
};
PrecisionAtK fact_precision(const Scorer& scorer, std::span<const QAInstance> instances, const ScorerData& data,
                            std::size_t threads = 1);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Algorithm-1 loop over t = 0..T on `train`; precision is tracked on
// `heldout` (may be empty).
TrainScorerResult train_scorer(std::span<const QAInstance> train, std::span<const QAInstance> heldout,
                               const ScorerData& data, const ScorerDims& dims, Variant variant, double dropout,
                               const MarginConfig& config, const EpochCallback& on_epoch = {});

}  // namespace kbqa
