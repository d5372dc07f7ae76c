#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kbqa/autodiff.hpp"
#include "kbqa/encoders.hpp"
#include "kbqa/kb.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

inline constexpr std::size_t kImageFeatureDim = 2048;
inline constexpr std::size_t kConceptDim = 1176;

// Layer widths of the image-question embedding network.
struct ScorerDims {
  std::size_t image_dim = kImageFeatureDim;
  std::size_t image_proj = 64;
  std::size_t embed_dim = 128;
  std::size_t hidden_dim = 128;
  std::size_t mlp1 = 256;
  std::size_t mlp2 = 128;
  std::size_t concept_dim = kConceptDim;
  std::size_t concept_proj = 128;
  // Must equal the fact-embedding length (twice the word-vector dim).
  std::size_t output_dim = 200;

  void validate() const;
};

// Which inputs the scorer sees; masked inputs are replaced by zeros at both
// training and inference time.
enum class Variant : std::uint8_t { kQuestionImage, kQuestionConcepts, kQuestionImageConcepts };
std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view s);

struct ScorerInput {
  std::span<const double> image;     // image_dim
  std::span<const double> concepts;  // concept_dim, multi-hot
  std::string_view question;
};

// Anything that maps (image, concepts, question) into fact-embedding space.
class FactEmbedder {
 public:
  virtual ~FactEmbedder() = default;
  virtual std::vector<double> embed(const ScorerInput& input) const = 0;
};

class Scorer final : public FactEmbedder {
 public:
  struct Encoded {
    std::span<const double> image;
    std::span<const double> concepts;
    std::vector<std::size_t> ids;
  };

  Scorer() = default;
  Scorer(ScorerDims dims, Vocabulary vocab, Variant variant = Variant::kQuestionImageConcepts, double dropout = 0.5);

  void init(Rng& rng, double scale = 0.08);

  // Batched forward: [batch x output_dim]. Affine layers are tanh-activated
  // except the final fusion layer. Dropout sits between the two MLP layers.
  Var forward(Tape& tape, std::span<const Encoded> batch, Mode mode, Rng* rng = nullptr) const;

  Encoded encode(const ScorerInput& input) const;
  std::vector<double> embed(const ScorerInput& input) const override;
  // Eval-mode embeddings of a pre-encoded batch, one row per input.
  std::vector<std::vector<double>> embed_batch(std::span<const Encoded> batch) const;

  const ScorerDims& dims() const { return dims_; }
  const Vocabulary& vocab() const { return vocab_; }
  Variant variant() const { return variant_; }
  double dropout_rate() const { return dropout_; }
  std::vector<ParamRef> params();

 private:
  void check_input(std::span<const double> image, std::span<const double> concepts) const;

  ScorerDims dims_;
  Vocabulary vocab_;
  Variant variant_ = Variant::kQuestionImageConcepts;
  double dropout_ = 0.5;
  Tensor image_w_, image_b_;
  LstmParams lstm_;
  Tensor mlp1_w_, mlp1_b_;
  Tensor mlp2_w_, mlp2_b_;
  Tensor concept_w_, concept_b_;
  Tensor fusion_w_, fusion_b_;
};

inline constexpr double kExcludedScore = -std::numeric_limits<double>::infinity();

// Cosine of the two vectors, or kExcludedScore when either has zero norm.
double score(std::span<const double> fact_emb, std::span<const double> iq_emb);

struct ScoredFact {
  std::size_t index = 0;  // position in the knowledge base
  double score = 0.0;
};

// Ties in score resolve by ascending fact id; with an Rng they resolve by a
// random permutation drawn from it instead.
struct TieBreak {
  Rng* rng = nullptr;
};

// Top-k candidates by cosine against a precomputed image-question embedding.
// Scores are computed one candidate at a time. Throws UsageError when
// `candidates` is empty.
std::vector<ScoredFact> rank_candidates(const KnowledgeBase& kb, const FactMatrix& facts,
                                        std::span<const std::size_t> candidates, std::span<const double> iq_emb,
                                        std::size_t k, TieBreak tie = {});

std::vector<ScoredFact> rank_facts(const FactEmbedder& model, const KnowledgeBase& kb, const FactMatrix& facts,
                                   std::span<const std::size_t> candidates, const ScorerInput& input, std::size_t k,
                                   TieBreak tie = {});

// Cosine of every candidate through one matrix-vector product.
std::vector<double> batch_scores(const FactMatrix& facts, std::span<const std::size_t> candidates,
                                 std::span<const double> iq_emb);

}  // namespace kbqa
