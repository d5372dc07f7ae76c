#include "kbqa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "kbqa/errors.hpp"
#include "kbqa/optimizer.hpp"
#include "kbqa/parallel.hpp"
#include "kbqa/random.hpp"

namespace kbqa {

namespace {

constexpr std::size_t kEmbedChunk = 100;

std::vector<std::size_t> eligible_negatives(const KnowledgeBase& kb, const FactMatrix* facts) {
  std::vector<std::size_t> out;
  out.reserve(kb.size());
  for (std::size_t i = 0; i < kb.size(); ++i) {
    if (!facts || !facts->is_zero(i)) out.push_back(i);
  }
  return out;
}

// Uniform without replacement from `pool` minus `gt` and `taken`, appended to
// `into` until it holds `want` entries or the pool runs dry.
void fill_random(std::vector<std::size_t>& into, std::size_t want, const std::vector<std::size_t>& pool,
                 std::size_t gt, Rng& rng) {
  if (into.size() >= want) return;
  std::vector<std::size_t> free;
  free.reserve(pool.size());
  std::vector<std::size_t> taken(into.begin(), into.end());
  std::sort(taken.begin(), taken.end());
  for (std::size_t f : pool) {
    if (f != gt && !std::binary_search(taken.begin(), taken.end(), f)) free.push_back(f);
  }
  const std::size_t k = std::min(want - into.size(), free.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(free[i], free[i + rng.index(free.size() - i)]);
    into.push_back(free[i]);
  }
}

std::vector<Scorer::Encoded> encode_all(const Scorer& scorer, std::span<const QAInstance> instances,
                                        const FeatureStore& features) {
  std::vector<Scorer::Encoded> out;
  out.reserve(instances.size());
  for (const auto& q : instances) {
    out.push_back(scorer.encode({features.features(q.image_id), features.concepts(q.image_id), q.question}));
  }
  return out;
}

// Eval embeddings in fixed-size chunks so the result does not depend on the
// worker count.
std::vector<std::vector<double>> embed_all(const Scorer& scorer, std::span<const Scorer::Encoded> encoded,
                                           std::size_t threads) {
  std::vector<std::vector<double>> out(encoded.size());
  const std::size_t chunks = (encoded.size() + kEmbedChunk - 1) / kEmbedChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * kEmbedChunk;
    const std::size_t end = std::min(encoded.size(), begin + kEmbedChunk);
    auto rows = scorer.embed_batch(encoded.subspan(begin, end - begin));
    for (std::size_t i = begin; i < end; ++i) out[i] = std::move(rows[i - begin]);
  });
  return out;
}

PrecisionAtK precision_from(const std::vector<std::vector<double>>& embeddings, std::span<const QAInstance> instances,
                            const ScorerData& data, std::size_t threads) {
  if (instances.empty()) return {};
  std::vector<int> rank_of(instances.size(), 0);  // 1-based rank of f*, 0 when below top-3
  parallel_for(instances.size(), threads, [&](std::size_t i) {
    const std::size_t gt = *data.kb.index_of(instances[i].fact_id);
    const auto top = rank_candidates(data.kb, data.facts, data.kb.bucket(instances[i].relation), embeddings[i], 3);
    for (std::size_t r = 0; r < top.size(); ++r) {
      if (top[r].index == gt && top[r].score != kExcludedScore) rank_of[i] = static_cast<int>(r) + 1;
    }
  });
  PrecisionAtK p;
  for (int r : rank_of) {
    p.at_1 += r == 1;
    p.at_3 += r >= 1;
  }
  p.at_1 /= static_cast<double>(instances.size());
  p.at_3 /= static_cast<double>(instances.size());
  return p;
}

void capture_pools(const Scorer& scorer, std::span<const Scorer::Encoded> encoded, std::span<const CandidateSet> sets,
                   const ScorerData& data, double slack, std::size_t threads, MiningState& state) {
  const auto embeddings = embed_all(scorer, encoded, threads);
  std::vector<std::size_t> all(data.kb.size());
  std::iota(all.begin(), all.end(), 0);
  parallel_for(sets.size(), threads, [&](std::size_t k) {
    const std::size_t gt = sets[k].groundtruth;
    if (data.facts.is_zero(gt)) return;
    const auto scores = batch_scores(data.facts, all, embeddings[k]);
    const double bar = scores[gt] - slack;
    auto& pool = state.pools[k];
    for (std::size_t f = 0; f < scores.size(); ++f) {
      if (f == gt || scores[f] == kExcludedScore || !(scores[f] > bar)) continue;
      auto [it, fresh] = pool.emplace(f, scores[f]);
      if (!fresh) it->second = std::max(it->second, scores[f]);
    }
  });
}

}  // namespace

void MarginConfig::validate() const {
  if (!(task_loss > 0.0)) throw UsageError("margin: task loss L must be positive");
  if (negatives == 0) throw UsageError("margin: negatives N must be at least 1");
  if (epochs == 0 || batch_size == 0) throw UsageError("margin: epochs and batch size must be positive");
  if (mining_period == 0) throw UsageError("margin: mining period must be positive");
  if (iterations > 0 && mining_period > epochs) {
    throw UsageError("margin: mining period " + std::to_string(mining_period) + " exceeds " + std::to_string(epochs) +
                     " epochs per iteration, so no pool would ever be captured");
  }
  if (!(regularizer >= 0.0)) throw UsageError("margin: regularizer C must be non-negative");
  if (!(learning_rate > 0.0)) throw UsageError("margin: learning rate must be positive");
}

std::size_t MiningState::pool_size() const {
  std::size_t n = 0;
  for (const auto& p : pools) n += p.size();
  return n;
}

double hinge_loss(std::span<const double> scores, std::size_t gt_index, double task_loss) {
  if (gt_index >= scores.size()) throw UsageError("hinge_loss: groundtruth index out of range");
  double best = scores[gt_index];
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j != gt_index) best = std::max(best, scores[j] + task_loss);
  }
  return best - scores[gt_index];
}

Var hinge(Var scores, std::size_t gt_index, double task_loss) {
  Tape& tape = *scores.tape;
  const Tensor& s = tape.value(scores);
  if (s.rank() != 1) throw ShapeError("hinge: scores must be a vector, got " + shape_str(s.shape()));
  if (gt_index >= s.size()) throw UsageError("hinge: groundtruth index out of range");
  std::size_t arg = gt_index;
  double best = s[gt_index];
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double v = j == gt_index ? s[j] : s[j] + task_loss;
    if (v > best) {
      best = v;
      arg = j;
    }
  }
  return tape.record(Tensor::scalar(best - s[gt_index]), {scores.id},
                     [in = scores.id, arg, gt_index](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto gs = t.grad_mut(in);
    gs[arg] += g;
    gs[gt_index] -= g;
  }, "hinge");
}

std::vector<CandidateSet> build_initial_dataset(std::span<const QAInstance> instances, const KnowledgeBase& kb,
                                                std::size_t negatives, std::uint64_t seed, const FactMatrix* facts) {
  if (negatives == 0) throw UsageError("build_initial_dataset: N must be at least 1");
  Rng rng(seed);
  const auto pool = eligible_negatives(kb, facts);
  std::vector<CandidateSet> out;
  out.reserve(instances.size());
  for (const auto& q : instances) {
    const auto gt = kb.index_of(q.fact_id);
    if (!gt) throw DataError("question " + q.question_id + " references unknown fact id '" + q.fact_id + "'");
    CandidateSet c{q.question_id, q.image_id, *gt, {}, 0};
    c.negatives.reserve(negatives);
    fill_random(c.negatives, negatives, pool, *gt, rng);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<CandidateSet> mine_hard_negatives(std::span<const CandidateSet> current, MiningState& state,
                                              const KnowledgeBase& kb, std::size_t negatives,
                                              const FactMatrix* facts) {
  if (state.pools.size() != current.size()) throw UsageError("mine_hard_negatives: pool count differs from key count");
  Rng rng(state.seed + 0x9E3779B97F4A7C15ULL * (state.iteration + 1));
  const auto pool = eligible_negatives(kb, facts);
  std::vector<CandidateSet> out;
  out.reserve(current.size());
  for (std::size_t k = 0; k < current.size(); ++k) {
    const CandidateSet& prev = current[k];
    std::vector<std::pair<std::size_t, double>> ranked;
    for (const auto& [f, s] : state.pools[k]) {
      if (f != prev.groundtruth) ranked.emplace_back(f, s);
    }
    if (ranked.empty()) ++state.empty_pool_fallbacks;
    const std::size_t take = std::min(negatives, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end(),
                      [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
    CandidateSet next{prev.key, prev.image_id, prev.groundtruth, {}, take};
    next.negatives.reserve(negatives);
    for (std::size_t i = 0; i < take; ++i) next.negatives.push_back(ranked[i].first);
    fill_random(next.negatives, negatives, pool, prev.groundtruth, rng);
    out.push_back(std::move(next));
  }
  return out;
}

PrecisionAtK fact_precision(const Scorer& scorer, std::span<const QAInstance> instances, const ScorerData& data,
                            std::size_t threads) {
  const auto encoded = encode_all(scorer, instances, data.features);
  return precision_from(embed_all(scorer, encoded, threads), instances, data, threads);
}

TrainScorerResult train_scorer(std::span<const QAInstance> train, std::span<const QAInstance> heldout,
                               const ScorerData& data, const ScorerDims& dims, Variant variant, double dropout,
                               const MarginConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  dims.validate();
  if (train.empty()) throw UsageError("train_scorer: empty training set");
  if (dims.output_dim != data.facts.dim()) {
    throw ShapeError("train_scorer: scorer output " + std::to_string(dims.output_dim) + " vs fact embedding " +
                     std::to_string(data.facts.dim()));
  }
  Rng root(config.seed);
  Rng init_rng = root.fork();
  Rng shuffle_rng = root.fork();
  Rng dropout_rng = root.fork();
  const std::uint64_t sample_seed = root.next();
  const std::uint64_t mining_seed = root.next();

  std::vector<std::string> questions;
  for (const auto& q : train) questions.push_back(q.question);

  TrainScorerResult result;
  result.scorer = Scorer(dims, Vocabulary::build(questions), variant, dropout);
  Scorer& scorer = result.scorer;
  scorer.init(init_rng, config.init_scale);

  const auto encoded = encode_all(scorer, train, data.features);
  const auto heldout_encoded = encode_all(scorer, heldout, data.features);

  std::vector<CandidateSet> sets = build_initial_dataset(train, data.kb, config.negatives, sample_seed, &data.facts);
  result.candidate_history.push_back(sets);
  MiningState state;
  state.seed = mining_seed;

  OptimizerConfig opt_config;
  opt_config.kind = OptimizerKind::kAdam;
  opt_config.learning_rate = config.learning_rate;
  opt_config.weight_decay = config.regularizer;
  opt_config.clip_norm = config.clip_norm;

  const std::size_t d = data.facts.dim();
  std::vector<std::size_t> order(train.size());
  // Continuing iterations keep the Adam moments along with the weights.
  auto optimizer = std::make_unique<Optimizer>(opt_config, scorer.params());
  for (std::size_t t = 0; t <= config.iterations; ++t) {
    if (t > 0 && config.reinitialize) {
      scorer.init(init_rng, config.init_scale);
      optimizer = std::make_unique<Optimizer>(opt_config, scorer.params());
    }
    state.iteration = t;
    state.pools.assign(train.size(), {});
    EpochRecord last;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      shuffle_rng.shuffle(order);
      double loss_total = 0.0;
      for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
        const std::size_t end = std::min(order.size(), begin + config.batch_size);
        std::vector<Scorer::Encoded> batch;
        std::vector<std::size_t> keys;
        for (std::size_t i = begin; i < end; ++i) {
          if (data.facts.is_zero(sets[order[i]].groundtruth)) continue;
          batch.push_back(encoded[order[i]]);
          keys.push_back(order[i]);
        }
        if (batch.empty()) continue;
        Tape tape;
        const Var g = scorer.forward(tape, batch, Mode::kTrain, &dropout_rng);
        std::vector<Var> losses;
        losses.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const CandidateSet& c = sets[keys[i]];
          Tensor cand(Shape{c.size(), d});
          std::copy_n(data.facts.row(c.groundtruth).data(), d, cand.data());
          for (std::size_t n = 0; n < c.negatives.size(); ++n) {
            std::copy_n(data.facts.row(c.negatives[n]).data(), d, cand.data() + (n + 1) * d);
          }
          const std::size_t row[] = {i};
          const Var scores = cosine_rows(gather_rows(g, row), tape.constant(std::move(cand)));
          losses.push_back(hinge(scores, 0, config.task_loss));
        }
        const Var loss = scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
        loss_total += tape.value(loss).item() * static_cast<double>(batch.size());
        tape.backward(loss);
        optimizer->step();
      }
      if ((epoch + 1) % config.mining_period == 0) {
        capture_pools(scorer, encoded, sets, data, config.slack(), config.threads, state);
      }
      last.iteration = t;
      last.epoch = epoch + 1;
      last.mean_loss = loss_total / static_cast<double>(train.size());
      const auto p = precision_from(embed_all(scorer, heldout_encoded, config.threads), heldout, data, config.threads);
      last.precision_at_1 = p.at_1;
      last.precision_at_3 = p.at_3;
      last.pool_size = state.pool_size();
      result.epochs.push_back(last);
      if (on_epoch) on_epoch(last);
    }
    IterationRecord it;
    it.iteration = t;
    it.candidate_sets = sets.size();
    for (const auto& c : sets) it.hard_negatives += c.hard;
    it.pool_size = state.pool_size();
    it.final_loss = last.mean_loss;
    it.precision_at_1 = last.precision_at_1;
    it.precision_at_3 = last.precision_at_3;
    result.iterations.push_back(it);
    if (t < config.iterations) {
      sets = mine_hard_negatives(sets, state, data.kb, config.negatives, &data.facts);
      result.candidate_history.push_back(sets);
    }
  }
  return result;
}

}  // namespace kbqa
