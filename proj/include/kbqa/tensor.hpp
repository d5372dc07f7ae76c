#pragma once

#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kbqa/errors.hpp"

namespace kbqa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major array of doubles with an optional gradient slot.
//
// Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix; nothing in this
// library needs more. The gradient slot is mutable so that frozen (const)
// parameters can still receive gradients from a tape; it is side-channel
// state, not part of the tensor's value.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_dims();
    values_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims();
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("Tensor: " + std::to_string(values_.size()) + " values for shape " + shape_str(shape_));
    }
  }

  // Copy of shape and values only; no gradient slot, requires_grad off.
  Tensor detached() const { return Tensor(shape_, values_); }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Leading extent for matrices, 1 otherwise.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  // Trailing extent; 1 for scalars.
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const {
    if (values_.size() != 1) throw ShapeError("Tensor::item on " + shape_str(shape_));
    return values_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  std::span<double> grad() const {
    if (!grad_) throw UsageError("Tensor::grad: no gradient populated");
    return *grad_;
  }
  // Allocates a zero gradient if absent and returns it.
  std::span<double> ensure_grad() const {
    if (!grad_) grad_.emplace(values_.size(), 0.0);
    return *grad_;
  }
  void clear_grad() const { grad_.reset(); }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("Tensor: zero-length dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  mutable std::optional<std::vector<double>> grad_;
};

}  // namespace kbqa
