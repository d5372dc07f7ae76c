#include "kbqa/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "kbqa/errors.hpp"
#include "kbqa/wordvec.hpp"

namespace kbqa {

// ---- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() {
  add(std::string(kPadToken));
  add(std::string(kUnkToken));
}

void Vocabulary::add(std::string token) {
  if (index_.contains(token)) return;
  index_.emplace(token, tokens_.size());
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> questions) {
  Vocabulary v;
  for (const auto& q : questions) {
    for (auto& tok : tokenize(q)) v.add(std::move(tok));
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
    throw DataError("vocabulary must start with <pad>, <unk>");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < tokens.size(); ++i) v.add(std::move(tokens[i]));
  if (v.size() != tokens.size()) throw DataError("vocabulary contains duplicate tokens");
  return v;
}

std::size_t Vocabulary::index(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& tok : tokens_) {
    for (unsigned char c : tok) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0x0A;
    h *= 1099511628211ULL;
  }
  return h;
}

Vocabulary::Encoded Vocabulary::encode(std::string_view question, std::size_t max_len) const {
  Encoded e;
  for (const auto& tok : tokenize(question)) {
    if (e.ids.size() == max_len) {
      e.truncated = true;
      break;
    }
    e.ids.push_back(index(tok));
  }
  return e;
}

// ---- LSTM -------------------------------------------------------------------

LstmParams::LstmParams(std::size_t vocab_size, std::size_t input, std::size_t hidden)
    : input_dim(input),
      hidden_dim(hidden),
      embedding(Shape{vocab_size, input}),
      weights(Shape{input + hidden, 4 * hidden}),
      bias(Shape{4 * hidden}) {
  for (Tensor* t : {&embedding, &weights, &bias}) t->set_requires_grad(true);
}

void LstmParams::init(Rng& rng, double scale) {
  for (double& x : embedding.values()) x = rng.uniform(-scale, scale);
  for (double& x : weights.values()) x = rng.uniform(-scale, scale);
  std::fill(bias.values().begin(), bias.values().end(), 0.0);
  std::fill(bias.values().begin() + static_cast<std::ptrdiff_t>(hidden_dim),
            bias.values().begin() + static_cast<std::ptrdiff_t>(2 * hidden_dim), 1.0);
}

std::vector<ParamRef> LstmParams::params(const std::string& prefix) {
  return {{prefix + "embedding", &embedding, true}, {prefix + "weights", &weights, true}, {prefix + "bias", &bias, false}};
}

Var lstm_encode(Tape& tape, const LstmParams& params, std::span<const std::vector<std::size_t>> batch, Mode mode,
                Rng* rng, LstmDropout drop) {
  if (batch.empty()) throw UsageError("lstm_encode: empty batch");
  if (mode == Mode::kTrain && (drop.embedding_rate > 0.0 || drop.hidden_rate > 0.0) && rng == nullptr) {
    throw UsageError("lstm_encode: training-mode dropout needs an Rng");
  }
  const std::size_t rows = batch.size();
  const std::size_t h = params.hidden_dim;
  std::size_t max_len = 0;
  std::size_t min_len = SIZE_MAX;
  for (const auto& seq : batch) {
    if (seq.empty()) throw UsageError("lstm_encode: empty token sequence");
    max_len = std::max(max_len, seq.size());
    min_len = std::min(min_len, seq.size());
  }
  const Var embed = tape.leaf(params.embedding);
  const Var weights = tape.leaf(params.weights);
  const Var bias = tape.leaf(params.bias);
  Var hidden = tape.constant(Tensor(Shape{rows, h}));
  Var cell = tape.constant(Tensor(Shape{rows, h}));
  Rng unused(0);
  Rng& r = rng ? *rng : unused;

  std::vector<std::size_t> ids(rows);
  for (std::size_t t = 0; t < max_len; ++t) {
    for (std::size_t i = 0; i < rows; ++i) ids[i] = t < batch[i].size() ? batch[i][t] : Vocabulary::kPad;
    Var x = dropout(gather_rows(embed, ids), drop.embedding_rate, mode, r);
    const Var parts[] = {x, hidden};
    const Var z = add(matmul(concat(parts), weights), bias);
    const Var in_gate = sigmoid(slice_cols(z, 0, h));
    const Var forget = sigmoid(slice_cols(z, h, 2 * h));
    const Var cand = tanh(slice_cols(z, 2 * h, 3 * h));
    const Var out_gate = sigmoid(slice_cols(z, 3 * h, 4 * h));
    const Var new_cell = add(mul(forget, cell), mul(in_gate, cand));
    const Var new_hidden = mul(out_gate, tanh(new_cell));
    if (t < min_len) {
      cell = new_cell;
      hidden = new_hidden;
      continue;
    }
    // Rows already past their length carry their state forward unchanged.
    Tensor keep(Shape{rows, h});
    Tensor hold(Shape{rows, h});
    for (std::size_t i = 0; i < rows; ++i) {
      const double active = t < batch[i].size() ? 1.0 : 0.0;
      std::fill_n(keep.data() + i * h, h, active);
      std::fill_n(hold.data() + i * h, h, 1.0 - active);
    }
    const Var keep_v = tape.constant(std::move(keep));
    const Var hold_v = tape.constant(std::move(hold));
    cell = add(mul(keep_v, new_cell), mul(hold_v, cell));
    hidden = add(mul(keep_v, new_hidden), mul(hold_v, hidden));
  }
  return dropout(hidden, drop.hidden_rate, mode, r);
}

std::vector<double> lstm_forward(const LstmParams& params, std::span<const std::size_t> ids) {
  Tape tape(GradMode::kDisabled);
  const std::vector<std::vector<std::size_t>> batch{std::vector<std::size_t>(ids.begin(), ids.end())};
  const Var h = lstm_encode(tape, params, batch, Mode::kEval);
  const auto v = tape.value(h).values();
  return {v.begin(), v.end()};
}

// ---- classifiers ------------------------------------------------------------

std::string_view to_string(AnswerSource s) { return s == AnswerSource::kImage ? "Image" : "KnowledgeBase"; }

std::optional<AnswerSource> parse_source(std::string_view s) {
  std::string lower;
  for (char c : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "image" || lower == "img") return AnswerSource::kImage;
  if (lower == "knowledgebase" || lower == "kb" || lower == "knowledge_base") return AnswerSource::kKnowledgeBase;
  return std::nullopt;
}

QuestionClassifier::QuestionClassifier(Vocabulary vocab, std::size_t embed_dim, std::size_t hidden_dim,
                                       std::size_t classes, LstmDropout dropout)
    : vocab_(std::move(vocab)),
      lstm_(vocab_.size(), embed_dim, hidden_dim),
      out_weights_(Shape{hidden_dim, classes}),
      out_bias_(Shape{classes}),
      dropout_(dropout) {
  out_weights_.set_requires_grad(true);
  out_bias_.set_requires_grad(true);
}

void QuestionClassifier::init(Rng& rng, double scale) {
  lstm_.init(rng, scale);
  for (double& x : out_weights_.values()) x = rng.uniform(-scale, scale);
  std::fill(out_bias_.values().begin(), out_bias_.values().end(), 0.0);
}

Var QuestionClassifier::logits(Tape& tape, std::span<const std::vector<std::size_t>> batch, Mode mode,
                               Rng* rng) const {
  const Var h = lstm_encode(tape, lstm_, batch, mode, rng, dropout_);
  return add(matmul(h, tape.leaf(out_weights_)), tape.leaf(out_bias_));
}

std::vector<double> QuestionClassifier::logits(std::string_view question) const {
  auto enc = vocab_.encode(question);
  if (enc.ids.empty()) throw UsageError("classifier: question has no tokens");
  Tape tape(GradMode::kDisabled);
  const std::vector<std::vector<std::size_t>> batch{std::move(enc.ids)};
  const auto v = tape.value(logits(tape, batch, Mode::kEval, nullptr)).values();
  return {v.begin(), v.end()};
}

std::vector<ParamRef> QuestionClassifier::params() {
  auto p = lstm_.params("lstm.");
  p.push_back({"out.weights", &out_weights_, true});
  p.push_back({"out.bias", &out_bias_, false});
  return p;
}

ClassifierConfig ClassifierConfig::relation_defaults() { return ClassifierConfig{}; }

ClassifierConfig ClassifierConfig::source_defaults() {
  ClassifierConfig c;
  c.embed_dim = 64;
  c.hidden_dim = 64;
  c.dropout = {0.5, 0.5};
  return c;
}

std::vector<std::pair<Relation, double>> RelationClassifier::predict(std::string_view question) const {
  const auto z = net_.logits(question);
  const double mx = *std::max_element(z.begin(), z.end());
  double denom = 0.0;
  for (double v : z) denom += std::exp(v - mx);
  std::vector<std::pair<Relation, double>> out;
  for (std::size_t i = 0; i < z.size(); ++i) out.emplace_back(static_cast<Relation>(i), std::exp(z[i] - mx) / denom);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

std::pair<AnswerSource, double> SourceClassifier::predict(std::string_view question) const {
  const double p = stable_sigmoid(net_.logits(question).at(0));
  return {p >= 0.5 ? AnswerSource::kImage : AnswerSource::kKnowledgeBase, p};
}

namespace {

// Shared minibatch loop. `Loss` builds the loss Var for a batch and reports the
// number of correct predictions through its last argument.
template <typename LossFn>
TrainingTrace run_training(QuestionClassifier& net, std::span<const std::vector<std::size_t>> encoded,
                           const ClassifierConfig& config, Rng& rng, LossFn loss_fn) {
  OptimizerConfig oc;
  oc.kind = OptimizerKind::kAdam;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.weight_decay;
  oc.clip_norm = config.clip_norm;
  Optimizer opt(oc, net.params());

  TrainingTrace trace;
  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<std::vector<std::size_t>> batch;
      batch.reserve(rows.size());
      for (std::size_t r : rows) batch.push_back(encoded[r]);
      Tape tape;
      const Var z = net.logits(tape, batch, Mode::kTrain, &rng);
      const Var loss = loss_fn(z, rows, correct);
      total += tape.value(loss).item() * static_cast<double>(rows.size());
      tape.backward(loss);
      opt.step();
    }
    trace.epoch_loss.push_back(total / static_cast<double>(order.size()));
    trace.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
  }
  return trace;
}

std::vector<std::vector<std::size_t>> encode_all(const Vocabulary& vocab, std::span<const std::string> questions,
                                                 std::size_t& truncated) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(questions.size());
  for (const auto& q : questions) {
    auto e = vocab.encode(q);
    if (e.ids.empty()) throw DataError("training question has no tokens: '" + q + "'");
    truncated += e.truncated ? 1 : 0;
    out.push_back(std::move(e.ids));
  }
  return out;
}

}  // namespace

Trained<RelationClassifier> train_relation_classifier(std::span<const std::pair<std::string, Relation>> data,
                                                      const ClassifierConfig& config) {
  if (data.empty()) throw UsageError("train_relation_classifier: empty dataset");
  std::vector<std::string> questions;
  std::vector<std::size_t> labels;
  for (const auto& [q, r] : data) {
    if (static_cast<std::size_t>(r) >= kNumRelations) throw DataError("relation label out of range");
    questions.push_back(q);
    labels.push_back(static_cast<std::size_t>(r));
  }
  Rng rng(config.seed);
  QuestionClassifier net(Vocabulary::build(questions), config.embed_dim, config.hidden_dim, kNumRelations,
                         config.dropout);
  net.init(rng, config.init_scale);
  std::size_t truncated = 0;
  const auto encoded = encode_all(net.vocab(), questions, truncated);
  auto trace = run_training(net, encoded, config, rng, [&](Var z, const std::vector<std::size_t>& rows, std::size_t& correct) {
    std::vector<std::size_t> y;
    const Tensor& logits = z.tape->value(z);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      y.push_back(labels[rows[i]]);
      const double* row = logits.data() + i * kNumRelations;
      correct += static_cast<std::size_t>(std::max_element(row, row + kNumRelations) - row) == y.back() ? 1 : 0;
    }
    return softmax_cross_entropy(z, y);
  });
  trace.truncated_questions = truncated;
  return {RelationClassifier(std::move(net)), std::move(trace)};
}

Trained<SourceClassifier> train_source_classifier(std::span<const std::pair<std::string, AnswerSource>> data,
                                                  const ClassifierConfig& config) {
  if (data.empty()) throw UsageError("train_source_classifier: empty dataset");
  std::vector<std::string> questions;
  std::vector<int> labels;
  for (const auto& [q, s] : data) {
    questions.push_back(q);
    labels.push_back(s == AnswerSource::kImage ? 1 : 0);
  }
  Rng rng(config.seed);
  QuestionClassifier net(Vocabulary::build(questions), config.embed_dim, config.hidden_dim, 1, config.dropout);
  net.init(rng, config.init_scale);
  std::size_t truncated = 0;
  const auto encoded = encode_all(net.vocab(), questions, truncated);
  auto trace = run_training(net, encoded, config, rng, [&](Var z, const std::vector<std::size_t>& rows, std::size_t& correct) {
    std::vector<int> y;
    const Tensor& logits = z.tape->value(z);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      y.push_back(labels[rows[i]]);
      correct += ((logits[i] >= 0.0 ? 1 : 0) == y.back()) ? 1 : 0;
    }
    return binary_cross_entropy(z, y);
  });
  trace.truncated_questions = truncated;
  return {SourceClassifier(std::move(net)), std::move(trace)};
}

}  // namespace kbqa
