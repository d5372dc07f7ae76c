#include "kbqa/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace kbqa {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

std::string op_prefix(std::string_view op) { return std::string(op) + ": "; }

}  // namespace

void check_same_tape(Var a, Var b, std::string_view op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw UsageError(op_prefix(op) + "operands belong to different tapes");
  }
}

// ---- Tape -----------------------------------------------------------------

void Tape::check(Var v, std::string_view op) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw UsageError(op_prefix(op) + "variable is not on this tape");
  }
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(const Tensor& value) {
  Node n;
  n.external = &value;
  n.is_param = records_grads() && value.requires_grad();
  n.needs_grad = n.is_param;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, std::string_view op) {
  for (double x : value.values()) {
    if (!std::isfinite(x)) throw NumericError(op_prefix(op) + "non-finite value in forward output");
  }
  Node n;
  n.owned = std::move(value);
  n.op = op;
  if (records_grads()) {
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw UsageError(op_prefix(op) + "input recorded after output");
      n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
    }
    if (n.needs_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(fn);
    }
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  check(v, "value");
  return node_value(nodes_[v.id]);
}

const Tensor& Tape::value(std::size_t id) const { return node_value(nodes_.at(id)); }

std::span<double> Tape::grad_mut(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(node_value(n).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  check(loss, "backward");
  if (backward_done_) throw UsageError("backward: tape already differentiated; re-run the forward pass");
  if (!records_grads()) throw UsageError("backward: tape was created with gradients disabled");
  if (value(loss).size() != 1) throw UsageError("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
  backward_done_ = true;

  // Parameters reachable from the tape start from a zero gradient, including
  // ones the loss does not depend on.
  for (Node& n : nodes_) {
    if (n.is_param) std::ranges::fill(n.external->ensure_grad(), 0.0);
  }
  grad_mut(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.is_param) {
      auto target = n.external->ensure_grad();
      for (std::size_t k = 0; k < target.size(); ++k) target[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

// ---- primitives -------------------------------------------------------------

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows()) {
    throw ShapeError("matmul: " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  }
  Tensor out(Shape{ta.rows(), tb.cols()});
  MutMap(out.data(), out.rows(), out.cols()).noalias() = as_matrix(ta) * as_matrix(tb);
  return tape.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& ta = t.value(a);
    const Tensor& tb = t.value(b);
    ConstMap g(t.grad(self).data(), ta.rows(), tb.cols());
    if (t.needs_grad(a)) {
      MutMap(t.grad_mut(a).data(), ta.rows(), ta.cols()).noalias() += g * as_matrix(tb).transpose();
    }
    if (t.needs_grad(b)) {
      MutMap(t.grad_mut(b).data(), tb.rows(), tb.cols()).noalias() += as_matrix(ta).transpose() * g;
    }
  }, "matmul");
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  const bool same = ta.shape() == tb.shape();
  const bool broadcast = !same && tb.rank() == 1 && ta.rank() == 2 && tb.size() == ta.cols();
  if (!same && !broadcast) {
    throw ShapeError("add: " + shape_str(ta.shape()) + " + " + shape_str(tb.shape()));
  }
  Tensor out = ta.detached();
  const std::size_t cols = tb.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[same ? i : i % cols];
  return tape.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, same, cols](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) {
      auto ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[same ? i : i % cols] += g[i];
    }
  }, "add");
}

Var add_n(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("add_n: no operands");
  Tape& tape = *parts[0].tape;
  const Shape& shape = tape.value(parts[0]).shape();
  Tensor out(shape);
  std::vector<std::size_t> ids;
  ids.reserve(parts.size());
  for (Var p : parts) {
    check_same_tape(parts[0], p, "add_n");
    const Tensor& tp = tape.value(p);
    if (tp.shape() != shape) throw ShapeError("add_n: mixed shapes " + shape_str(shape) + " and " + shape_str(tp.shape()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tp[i];
    ids.push_back(p.id);
  }
  auto inputs = ids;
  return tape.record(std::move(out), std::move(ids), [inputs = std::move(inputs)](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    for (std::size_t id : inputs) {
      if (!t.needs_grad(id)) continue;
      auto gi = t.grad_mut(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  }, "add_n");
}

Var scale(Var a, double factor) {
  Tape& tape = *a.tape;
  Tensor out = tape.value(a).detached();
  for (double& x : out.values()) x *= factor;
  return tape.record(std::move(out), {a.id}, [a = a.id, factor](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  }, "scale");
}

Var sum(Var a) {
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  double s = 0.0;
  for (double x : ta.values()) s += x;
  return tape.record(Tensor::scalar(s), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad_mut(a)) x += g;
  }, "sum");
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat: empty list");
  Tape& tape = *parts[0].tape;
  const Tensor& first = tape.value(parts[0]);
  const std::size_t rank = first.rank();
  if (rank == 0 || rank > 2) throw ShapeError("concat: needs vectors or matrices, got " + shape_str(first.shape()));
  const std::size_t rows = first.rows();
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (Var p : parts) {
    check_same_tape(parts[0], p, "concat");
    const Tensor& tp = tape.value(p);
    if (tp.rank() != rank || tp.rows() != rows) {
      throw ShapeError("concat: " + shape_str(first.shape()) + " vs " + shape_str(tp.shape()));
    }
    widths.push_back(tp.cols());
    ids.push_back(p.id);
    total += tp.cols();
  }
  Tensor out(rank == 1 ? Shape{total} : Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& tp = tape.value(parts[k]);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(tp.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  auto inputs = ids;
  return tape.record(std::move(out), std::move(ids),
                     [inputs = std::move(inputs), widths = std::move(widths), rows, total](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (t.needs_grad(inputs[k])) {
        auto gk = t.grad_mut(inputs[k]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) gk[r * widths[k] + c] += g[r * total + offset + c];
        }
      }
      offset += widths[k];
    }
  }, "concat");
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  if (ta.rank() == 0 || begin >= end || end > ta.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(ta.shape()));
  }
  const std::size_t rows = ta.rows();
  const std::size_t cols = ta.cols();
  const std::size_t width = end - begin;
  Tensor out(ta.rank() == 1 ? Shape{width} : Shape{rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ta.data() + r * cols + begin, width, out.data() + r * width);
  }
  return tape.record(std::move(out), {a.id}, [a = a.id, rows, cols, begin, width](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad_mut(a);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
    }
  }, "slice_cols");
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Tape& tape = *table.tape;
  const Tensor& tt = tape.value(table);
  if (tt.rank() != 2) throw ShapeError("gather_rows: table must be a matrix, got " + shape_str(tt.shape()));
  if (rows.empty()) throw UsageError("gather_rows: no rows requested");
  const std::size_t width = tt.cols();
  Tensor out(Shape{rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= tt.rows()) throw UsageError("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(tt.data() + rows[i] * width, width, out.data() + i * width);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record(std::move(out), {table.id}, [table = table.id, idx = std::move(idx), width](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto gt = t.grad_mut(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < width; ++c) gt[idx[i] * width + c] += g[i * width + c];
    }
  }, "gather_rows");
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Var pointwise(Pointwise kind, Var a) {
  Tape& tape = *a.tape;
  Tensor out = tape.value(a).detached();
  for (double& x : out.values()) x = kind == Pointwise::kTanh ? std::tanh(x) : stable_sigmoid(x);
  return tape.record(std::move(out), {a.id}, [a = a.id, kind](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& y = t.value(self);
    auto ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = kind == Pointwise::kTanh ? 1.0 - y[i] * y[i] : y[i] * (1.0 - y[i]);
      ga[i] += g[i] * d;
    }
  }, kind == Pointwise::kTanh ? "tanh" : "sigmoid");
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  Tape& tape = *a.tape;
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  if (ta.shape() != tb.shape()) throw ShapeError("mul: " + shape_str(ta.shape()) + " * " + shape_str(tb.shape()));
  Tensor out = ta.detached();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
  return tape.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(a)) {
      const Tensor& tb = t.value(b);
      auto ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * tb[i];
    }
    if (t.needs_grad(b)) {
      const Tensor& ta = t.value(a);
      auto gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ta[i];
    }
  }, "mul");
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& tape = *logits.tape;
  const Tensor& z = tape.value(logits);
  const std::size_t batch = z.rows();
  const std::size_t k = z.cols();
  if (z.rank() == 0 || labels.size() != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(z.shape()));
  }
  Tensor probs(Shape{batch, k});
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    if (labels[r] >= k) {
      throw UsageError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(k) + ")");
    }
    const double* row = z.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) probs.at(r, c) = std::exp(row[c] - mx) / denom;
    loss += std::log(denom) + mx - row[labels[r]];
  }
  loss /= static_cast<double>(batch);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(loss), {logits.id},
                     [id = logits.id, probs = std::move(probs), y = std::move(y)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(y.size());
    auto gz = t.grad_mut(id);
    const std::size_t k = probs.cols();
    for (std::size_t r = 0; r < y.size(); ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        gz[r * k + c] += g * (probs.at(r, c) - (c == y[r] ? 1.0 : 0.0));
      }
    }
  }, "softmax_cross_entropy");
}

Var binary_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = *logits.tape;
  const Tensor& z = tape.value(logits);
  if (z.size() != labels.size() || (z.rank() == 2 && z.cols() != 1) || z.rank() == 0) {
    throw ShapeError("binary_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(z.shape()));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("binary_cross_entropy: label must be 0 or 1");
    const double x = z[i];
    loss += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(labels.size());
  std::vector<int> y(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(loss), {logits.id}, [id = logits.id, y = std::move(y)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(y.size());
    const Tensor& z = t.value(id);
    auto gz = t.grad_mut(id);
    for (std::size_t i = 0; i < y.size(); ++i) gz[i] += g * (stable_sigmoid(z[i]) - y[i]);
  }, "binary_cross_entropy");
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Var cosine_similarity(Var u, Var v) {
  check_same_tape(u, v, "cosine_similarity");
  Tape& tape = *u.tape;
  const Tensor& tu = tape.value(u);
  const Tensor& tv = tape.value(v);
  if (tu.size() != tv.size()) throw ShapeError("cosine_similarity: " + shape_str(tu.shape()) + " vs " + shape_str(tv.shape()));
  const double nu = norm(tu.values());
  const double nv = norm(tv.values());
  if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
  const double c = dot(tu.values(), tv.values()) / (nu * nv);
  return tape.record(Tensor::scalar(c), {u.id, v.id}, [u = u.id, v = v.id, nu, nv, c](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& tu = t.value(u);
    const Tensor& tv = t.value(v);
    if (t.needs_grad(u)) {
      auto gu = t.grad_mut(u);
      for (std::size_t i = 0; i < gu.size(); ++i) gu[i] += g * (tv[i] / (nu * nv) - c * tu[i] / (nu * nu));
    }
    if (t.needs_grad(v)) {
      auto gv = t.grad_mut(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g * (tu[i] / (nu * nv) - c * tv[i] / (nv * nv));
    }
  }, "cosine_similarity");
}

Var cosine_rows(Var u, Var rows) {
  check_same_tape(u, rows, "cosine_rows");
  Tape& tape = *u.tape;
  const Tensor& tu = tape.value(u);
  const Tensor& tr = tape.value(rows);
  const std::size_t d = tu.size();
  if (tr.rank() != 2 || tr.cols() != d) {
    throw ShapeError("cosine_rows: " + shape_str(tu.shape()) + " against " + shape_str(tr.shape()));
  }
  const std::size_t n = tr.rows();
  const double nu = norm(tu.values());
  if (nu == 0.0) throw DegenerateInputError("cosine_rows: zero-norm query");
  std::vector<double> row_norms(n);
  Tensor out(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const double> row(tr.data() + r * d, d);
    row_norms[r] = norm(row);
    if (row_norms[r] == 0.0) throw DegenerateInputError("cosine_rows: zero-norm row " + std::to_string(r));
    out[r] = dot(tu.values(), row) / (nu * row_norms[r]);
  }
  return tape.record(std::move(out), {u.id, rows.id},
                     [u = u.id, rid = rows.id, nu, row_norms = std::move(row_norms), d](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& tu = t.value(u);
    const Tensor& tr = t.value(rid);
    const Tensor& c = t.value(self);
    const bool gu_on = t.needs_grad(u);
    const bool gr_on = t.needs_grad(rid);
    for (std::size_t r = 0; r < row_norms.size(); ++r) {
      if (g[r] == 0.0) continue;
      const double nr = row_norms[r];
      const double* row = tr.data() + r * d;
      if (gu_on) {
        auto gu = t.grad_mut(u);
        for (std::size_t i = 0; i < d; ++i) gu[i] += g[r] * (row[i] / (nu * nr) - c[r] * tu[i] / (nu * nu));
      }
      if (gr_on) {
        auto gr = t.grad_mut(rid);
        for (std::size_t i = 0; i < d; ++i) gr[r * d + i] += g[r] * (tu[i] / (nu * nr) - c[r] * row[i] / (nr * nr));
      }
    }
  }, "cosine_rows");
}

Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw UsageError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::kEval || rate == 0.0) return x;
  Tape& tape = *x.tape;
  const Tensor& tx = tape.value(x);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(tx.size());
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = tx[i] * mask[i];
  }
  return tape.record(std::move(out), {x.id}, [x = x.id, mask = std::move(mask)](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  }, "dropout");
}

}  // namespace kbqa
