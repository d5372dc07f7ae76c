#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "kbqa/random.hpp"
#include "kbqa/tensor.hpp"

namespace kbqa {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

enum class Mode { kTrain, kEval };
enum class GradMode { kEnabled, kDisabled };

// Define-by-run computation record. Every primitive application appends one
// node; backward() walks the nodes once, newest to oldest.
class Tape {
 public:
  // Called during backward with the tape and the id of the node whose
  // gradient is being propagated to its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(GradMode mode = GradMode::kEnabled) : grad_mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Owned value that never receives a gradient.
  Var constant(Tensor value);
  // Borrowed value; the referenced tensor must outlive the tape. If it
  // requires grad and the tape records gradients, backward() accumulates into
  // its gradient slot.
  Var leaf(const Tensor& value);

  // Appends the result of a primitive. `inputs` are node ids the primitive
  // read; `fn` propagates this node's gradient into them. Non-finite values
  // are rejected here so every op inherits the check.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, std::string_view op);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id); }

  // Gradient buffers, valid only inside a backward pass.
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  std::span<double> grad_mut(std::size_t id);

  // Reverse-mode pass from a scalar loss. A tape supports exactly one pass;
  // a second call throws UsageError.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_visits() const { return visits_; }
  bool records_grads() const { return grad_mode_ == GradMode::kEnabled; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<double> grad;
    bool needs_grad = false;
    bool is_param = false;
    std::string_view op;
  };

  const Tensor& node_value(const Node& n) const { return n.external ? *n.external : n.owned; }
  void check(Var v, std::string_view op) const;

  std::vector<Node> nodes_;
  GradMode grad_mode_;
  bool backward_done_ = false;
  std::size_t visits_ = 0;

  friend void check_same_tape(Var a, Var b, std::string_view op);
};

// ---- primitives ----------------------------------------------------------

Var matmul(Var a, Var b);
// Equal shapes, or `b` a vector matching the last dim of `a` (row broadcast).
Var add(Var a, Var b);
Var add_n(std::span<const Var> parts);
Var scale(Var a, double factor);
Var sum(Var a);
// Concatenation along the last axis.
Var concat(std::span<const Var> parts);
// Columns [begin, end) of a matrix or elements of a vector.
Var slice_cols(Var a, std::size_t begin, std::size_t end);
// Rows of a matrix by index; used for embedding lookup.
Var gather_rows(Var table, std::span<const std::size_t> rows);

enum class Pointwise { kTanh, kSigmoid };
Var pointwise(Pointwise kind, Var a);
inline Var tanh(Var a) { return pointwise(Pointwise::kTanh, a); }
inline Var sigmoid(Var a) { return pointwise(Pointwise::kSigmoid, a); }
// Hadamard product.
Var mul(Var a, Var b);

// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);
// Mean over rows of the logistic loss; logits are [B] or [Bx1].
Var binary_cross_entropy(Var logits, std::span<const int> labels);
// u.v / (|u||v|); inputs are flattened. Throws DegenerateInputError on a zero norm.
Var cosine_similarity(Var u, Var v);
// Cosine of `u` against every row of `rows` -> vector of length rows().
Var cosine_rows(Var u, Var rows);
// Inverted dropout. Eval mode and rate 0 return `x` unchanged.
Var dropout(Var x, double rate, Mode mode, Rng& rng);

// ---- plain helpers shared with non-differentiable code paths -------------

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double stable_sigmoid(double z);

}  // namespace kbqa
