#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kbqa/tensor.hpp"

namespace kbqa {

// A trainable tensor as seen by optimizers and checkpoints.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  // Weight matrices decay; biases do not.
  bool decay = true;
};

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Coefficient C of the squared-norm regularizer, applied as decoupled decay.
  double weight_decay = 0.0;
  // Global-norm gradient clipping threshold; 0 disables.
  double clip_norm = 0.0;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<ParamRef> params);

  // Applies one update from the populated gradients, then clears them.
  // Throws UsageError if any parameter has no gradient.
  void step();

  std::int64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }
  // Global L2 norm of the gradients seen by the last step, before clipping.
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  OptimizerConfig config_;
  std::vector<ParamRef> params_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  std::int64_t steps_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace kbqa
