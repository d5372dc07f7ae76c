#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kbqa/autodiff.hpp"
#include "kbqa/kb.hpp"
#include "kbqa/optimizer.hpp"

namespace kbqa {

inline constexpr std::size_t kMaxQuestionTokens = 30;

// Question-token index. PAD is 0 and UNK is 1; real tokens follow in order of
// first appearance.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();
  static Vocabulary build(std::span<const std::string> questions);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::size_t index(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  // FNV-1a over the token list; identifies the vocabulary in checkpoints.
  std::uint64_t hash() const;

  struct Encoded {
    std::vector<std::size_t> ids;
    bool truncated = false;
  };
  Encoded encode(std::string_view question, std::size_t max_len = kMaxQuestionTokens) const;

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Single-layer LSTM with its own word-embedding table. Gate blocks in the
// fused weight are ordered input, forget, candidate, output.
struct LstmParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor embedding;  // vocab x input_dim
  Tensor weights;    // (input_dim + hidden_dim) x 4*hidden_dim
  Tensor bias;       // 4*hidden_dim

  LstmParams() = default;
  LstmParams(std::size_t vocab_size, std::size_t input_dim, std::size_t hidden_dim);

  // uniform(-scale, scale) weights, zero bias except forget gate +1.
  void init(Rng& rng, double scale = 0.08);
  std::vector<ParamRef> params(const std::string& prefix);
};

struct LstmDropout {
  double embedding_rate = 0.0;
  double hidden_rate = 0.0;
};

// Encodes a batch of token-id sequences into their final hidden states
// [batch x hidden]. Each row stops updating after its own length, so padding
// never influences the result. Throws UsageError on an empty sequence.
Var lstm_encode(Tape& tape, const LstmParams& params, std::span<const std::vector<std::size_t>> batch, Mode mode,
                Rng* rng = nullptr, LstmDropout dropout = {});

// Convenience single-sequence forward returning h_T.
std::vector<double> lstm_forward(const LstmParams& params, std::span<const std::size_t> ids);

enum class AnswerSource : std::uint8_t { kKnowledgeBase = 0, kImage = 1 };
std::string_view to_string(AnswerSource s);
std::optional<AnswerSource> parse_source(std::string_view s);

// LSTM over question tokens followed by a linear layer to `classes` logits.
class QuestionClassifier {
 public:
  QuestionClassifier() = default;
  QuestionClassifier(Vocabulary vocab, std::size_t embed_dim, std::size_t hidden_dim, std::size_t classes,
                     LstmDropout dropout);

  void init(Rng& rng, double scale = 0.08);
  Var logits(Tape& tape, std::span<const std::vector<std::size_t>> batch, Mode mode, Rng* rng) const;
  std::vector<double> logits(std::string_view question) const;

  const Vocabulary& vocab() const { return vocab_; }
  const LstmParams& lstm() const { return lstm_; }
  std::size_t classes() const { return out_bias_.size(); }
  const LstmDropout& dropout() const { return dropout_; }
  std::vector<ParamRef> params();

 private:
  Vocabulary vocab_;
  LstmParams lstm_;
  Tensor out_weights_;
  Tensor out_bias_;
  LstmDropout dropout_;
};

struct ClassifierConfig {
  std::size_t embed_dim = 128;
  std::size_t hidden_dim = 128;
  LstmDropout dropout{0.7, 0.7};
  std::size_t epochs = 50;
  std::size_t batch_size = 100;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double clip_norm = 5.0;
  double init_scale = 0.08;
  std::uint64_t seed = 1;

  static ClassifierConfig relation_defaults();
  static ClassifierConfig source_defaults();
};

class RelationClassifier {
 public:
  RelationClassifier() = default;
  explicit RelationClassifier(QuestionClassifier net) : net_(std::move(net)) {}

  // Softmax distribution over the 13 relations, highest first. Ties keep
  // enum order.
  std::vector<std::pair<Relation, double>> predict(std::string_view question) const;

  QuestionClassifier& net() { return net_; }
  const QuestionClassifier& net() const { return net_; }

 private:
  QuestionClassifier net_;
};

class SourceClassifier {
 public:
  SourceClassifier() = default;
  explicit SourceClassifier(QuestionClassifier net) : net_(std::move(net)) {}

  // Probability is P(Image). p >= 0.5 resolves to Image.
  std::pair<AnswerSource, double> predict(std::string_view question) const;

  QuestionClassifier& net() { return net_; }
  const QuestionClassifier& net() const { return net_; }

 private:
  QuestionClassifier net_;
};

struct TrainingTrace {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  std::size_t truncated_questions = 0;
};

template <typename Model>
struct Trained {
  Model model;
  TrainingTrace trace;
};

Trained<RelationClassifier> train_relation_classifier(std::span<const std::pair<std::string, Relation>> data,
                                                      const ClassifierConfig& config);
Trained<SourceClassifier> train_source_classifier(std::span<const std::pair<std::string, AnswerSource>> data,
                                                  const ClassifierConfig& config);

}  // namespace kbqa
