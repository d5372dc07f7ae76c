#include "kbqa/scorer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kbqa/errors.hpp"

namespace kbqa {

void ScorerDims::validate() const {
  for (std::size_t d : {image_dim, image_proj, embed_dim, hidden_dim, mlp1, mlp2, concept_dim, concept_proj, output_dim}) {
    if (d == 0) throw UsageError("ScorerDims: every width must be positive");
  }
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kQuestionImage: return "Q+I";
    case Variant::kQuestionConcepts: return "Q+VC";
    case Variant::kQuestionImageConcepts: return "Q+I+VC";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view s) {
  if (s == "Q+I" || s == "q+i" || s == "question-image") return Variant::kQuestionImage;
  if (s == "Q+VC" || s == "q+vc" || s == "question-concepts") return Variant::kQuestionConcepts;
  if (s == "Q+I+VC" || s == "q+i+vc" || s == "question-image-concepts") return Variant::kQuestionImageConcepts;
  return std::nullopt;
}

namespace {

Tensor trainable(Shape shape) {
  Tensor t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

void fill_uniform(Tensor& t, Rng& rng, double scale) {
  for (double& x : t.values()) x = rng.uniform(-scale, scale);
}

const ScorerDims& checked(const ScorerDims& d) {
  d.validate();
  return d;
}

Var affine(Tape& tape, Var x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, tape.leaf(w)), tape.leaf(b));
}

}  // namespace

Scorer::Scorer(ScorerDims dims, Vocabulary vocab, Variant variant, double dropout)
    : dims_(checked(dims)),
      vocab_(std::move(vocab)),
      variant_(variant),
      dropout_(dropout),
      image_w_(trainable({dims.image_dim, dims.image_proj})),
      image_b_(trainable({dims.image_proj})),
      lstm_(vocab_.size(), dims.embed_dim, dims.hidden_dim),
      mlp1_w_(trainable({dims.image_proj + dims.hidden_dim, dims.mlp1})),
      mlp1_b_(trainable({dims.mlp1})),
      mlp2_w_(trainable({dims.mlp1, dims.mlp2})),
      mlp2_b_(trainable({dims.mlp2})),
      concept_w_(trainable({dims.concept_dim, dims.concept_proj})),
      concept_b_(trainable({dims.concept_proj})),
      fusion_w_(trainable({dims.mlp2 + dims.concept_proj, dims.output_dim})),
      fusion_b_(trainable({dims.output_dim})) {
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("Scorer: dropout must lie in [0, 1)");
}

void Scorer::init(Rng& rng, double scale) {
  lstm_.init(rng, scale);
  for (Tensor* w : {&image_w_, &mlp1_w_, &mlp2_w_, &concept_w_, &fusion_w_}) fill_uniform(*w, rng, scale);
  for (Tensor* b : {&image_b_, &mlp1_b_, &mlp2_b_, &concept_b_, &fusion_b_}) {
    std::fill(b->values().begin(), b->values().end(), 0.0);
  }
}

std::vector<ParamRef> Scorer::params() {
  std::vector<ParamRef> p = {
      {"image.weights", &image_w_, true}, {"image.bias", &image_b_, false},
  };
  for (auto& r : lstm_.params("question.")) p.push_back(r);
  p.insert(p.end(), {
      {"mlp1.weights", &mlp1_w_, true},     {"mlp1.bias", &mlp1_b_, false},
      {"mlp2.weights", &mlp2_w_, true},     {"mlp2.bias", &mlp2_b_, false},
      {"concept.weights", &concept_w_, true}, {"concept.bias", &concept_b_, false},
      {"fusion.weights", &fusion_w_, true}, {"fusion.bias", &fusion_b_, false},
  });
  return p;
}

void Scorer::check_input(std::span<const double> image, std::span<const double> concepts) const {
  if (image.size() != dims_.image_dim) {
    throw ShapeError("scorer: image feature has length " + std::to_string(image.size()) + ", expected " +
                     std::to_string(dims_.image_dim));
  }
  if (concepts.size() != dims_.concept_dim) {
    throw ShapeError("scorer: concept vector has length " + std::to_string(concepts.size()) + ", expected " +
                     std::to_string(dims_.concept_dim));
  }
}

Scorer::Encoded Scorer::encode(const ScorerInput& input) const {
  check_input(input.image, input.concepts);
  auto e = vocab_.encode(input.question);
  if (e.ids.empty()) throw UsageError("scorer: question has no tokens");
  return {input.image, input.concepts, std::move(e.ids)};
}

Var Scorer::forward(Tape& tape, std::span<const Encoded> batch, Mode mode, Rng* rng) const {
  if (batch.empty()) throw UsageError("scorer: empty batch");
  if (mode == Mode::kTrain && dropout_ > 0.0 && rng == nullptr) throw UsageError("scorer: training dropout needs an Rng");
  const std::size_t rows = batch.size();
  const bool use_image = variant_ != Variant::kQuestionConcepts;
  const bool use_concepts = variant_ != Variant::kQuestionImage;

  Tensor images(Shape{rows, dims_.image_dim});
  Tensor concepts(Shape{rows, dims_.concept_dim});
  std::vector<std::vector<std::size_t>> ids;
  ids.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    check_input(batch[i].image, batch[i].concepts);
    if (use_image) std::copy(batch[i].image.begin(), batch[i].image.end(), images.data() + i * dims_.image_dim);
    if (use_concepts) {
      std::copy(batch[i].concepts.begin(), batch[i].concepts.end(), concepts.data() + i * dims_.concept_dim);
    }
    ids.push_back(batch[i].ids);
  }

  Rng unused(0);
  Rng& r = rng ? *rng : unused;
  const Var image_emb = tanh(affine(tape, tape.constant(std::move(images)), image_w_, image_b_));
  const Var question_emb = lstm_encode(tape, lstm_, ids, mode, rng);
  const Var joint[] = {image_emb, question_emb};
  Var hidden = tanh(affine(tape, concat(joint), mlp1_w_, mlp1_b_));
  hidden = dropout(hidden, dropout_, mode, r);
  hidden = tanh(affine(tape, hidden, mlp2_w_, mlp2_b_));
  const Var concept_emb = tanh(affine(tape, tape.constant(std::move(concepts)), concept_w_, concept_b_));
  const Var fused[] = {hidden, concept_emb};
  return affine(tape, concat(fused), fusion_w_, fusion_b_);
}

std::vector<double> Scorer::embed(const ScorerInput& input) const {
  Tape tape(GradMode::kDisabled);
  const Encoded enc[] = {encode(input)};
  const auto v = tape.value(forward(tape, enc, Mode::kEval)).values();
  return {v.begin(), v.end()};
}

std::vector<std::vector<double>> Scorer::embed_batch(std::span<const Encoded> batch) const {
  Tape tape(GradMode::kDisabled);
  const Tensor& g = tape.value(forward(tape, batch, Mode::kEval));
  std::vector<std::vector<double>> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out[i].assign(g.data() + i * g.cols(), g.data() + (i + 1) * g.cols());
  return out;
}

double score(std::span<const double> fact_emb, std::span<const double> iq_emb) {
  if (fact_emb.size() != iq_emb.size()) {
    throw ShapeError("score: fact embedding length " + std::to_string(fact_emb.size()) + " vs " +
                     std::to_string(iq_emb.size()));
  }
  const double nf = norm(fact_emb);
  const double nq = norm(iq_emb);
  if (nf == 0.0 || nq == 0.0) return kExcludedScore;
  return dot(fact_emb, iq_emb) / (nf * nq);
}

std::vector<ScoredFact> rank_candidates(const KnowledgeBase& kb, const FactMatrix& facts,
                                        std::span<const std::size_t> candidates, std::span<const double> iq_emb,
                                        std::size_t k, TieBreak tie) {
  if (candidates.empty()) throw UsageError("rank_facts: empty candidate list");
  if (iq_emb.size() != facts.dim()) {
    throw ShapeError("rank_facts: embedding length " + std::to_string(iq_emb.size()) + " vs fact dim " +
                     std::to_string(facts.dim()));
  }
  const double nq = norm(iq_emb);
  std::vector<ScoredFact> scored;
  scored.reserve(candidates.size());
  for (std::size_t idx : candidates) {
    if (idx >= facts.rows()) throw UsageError("rank_facts: candidate index out of range");
    const double nf = facts.row_norm(idx);
    const double s = (nf == 0.0 || nq == 0.0) ? kExcludedScore : dot(facts.row(idx), iq_emb) / (nf * nq);
    scored.push_back({idx, s});
  }
  std::vector<std::uint64_t> keys;
  if (tie.rng) {
    // One random key per fact index, drawn in fact-index order so the result
    // does not depend on candidate order.
    std::vector<std::size_t> sorted(candidates.begin(), candidates.end());
    std::sort(sorted.begin(), sorted.end());
    keys.assign(facts.rows(), 0);
    for (std::size_t idx : sorted) keys[idx] = tie.rng->next();
  }
  auto better = [&](const ScoredFact& a, const ScoredFact& b) {
    if (a.score != b.score) return a.score > b.score;
    if (tie.rng && keys[a.index] != keys[b.index]) return keys[a.index] < keys[b.index];
    return kb.fact(a.index).id < kb.fact(b.index).id;
  };
  const std::size_t n = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), better);
  scored.resize(n);
  return scored;
}

std::vector<ScoredFact> rank_facts(const FactEmbedder& model, const KnowledgeBase& kb, const FactMatrix& facts,
                                   std::span<const std::size_t> candidates, const ScorerInput& input, std::size_t k,
                                   TieBreak tie) {
  if (candidates.empty()) throw UsageError("rank_facts: empty candidate list");
  const auto iq = model.embed(input);
  return rank_candidates(kb, facts, candidates, iq, k, tie);
}

std::vector<double> batch_scores(const FactMatrix& facts, std::span<const std::size_t> candidates,
                                 std::span<const double> iq_emb) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto d = static_cast<Eigen::Index>(facts.dim());
  if (iq_emb.size() != facts.dim()) throw ShapeError("batch_scores: embedding length mismatch");
  RowMajor block(static_cast<Eigen::Index>(candidates.size()), d);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    block.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(facts.row(candidates[i]).data(), d);
  }
  const Eigen::VectorXd dots = block * Eigen::Map<const Eigen::VectorXd>(iq_emb.data(), d);
  const double nq = norm(iq_emb);
  std::vector<double> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double nf = facts.row_norm(candidates[i]);
    out[i] = (nf == 0.0 || nq == 0.0) ? kExcludedScore : dots[static_cast<Eigen::Index>(i)] / (nf * nq);
  }
  return out;
}

}  // namespace kbqa
