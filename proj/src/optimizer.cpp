#include "kbqa/optimizer.hpp"

#include <cmath>

namespace kbqa {

Optimizer::Optimizer(OptimizerConfig config, std::vector<ParamRef> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.learning_rate > 0.0)) throw UsageError("Optimizer: learning rate must be positive");
  if (config_.weight_decay < 0.0) throw UsageError("Optimizer: weight decay must be non-negative");
  for (const ParamRef& p : params_) {
    if (p.tensor == nullptr) throw UsageError("Optimizer: null parameter " + p.name);
    if (config_.kind == OptimizerKind::kAdam) {
      first_moment_.emplace_back(p.tensor->size(), 0.0);
      second_moment_.emplace_back(p.tensor->size(), 0.0);
    }
  }
}

void Optimizer::step() {
  double sq = 0.0;
  for (const ParamRef& p : params_) {
    if (!p.tensor->has_grad()) throw UsageError("Optimizer::step: parameter '" + p.name + "' has no gradient");
    for (double g : p.tensor->grad()) sq += g * g;
  }
  last_grad_norm_ = std::sqrt(sq);
  double clip = 1.0;
  if (config_.clip_norm > 0.0 && last_grad_norm_ > config_.clip_norm) clip = config_.clip_norm / last_grad_norm_;

  ++steps_;
  const double lr = config_.learning_rate;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = *params_[k].tensor;
    auto g = w.grad();
    const double decay = params_[k].decay ? lr * config_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      double update;
      if (config_.kind == OptimizerKind::kAdam) {
        double& m = first_moment_[k][i];
        double& v = second_moment_[k][i];
        m = config_.beta1 * m + (1.0 - config_.beta1) * gi;
        v = config_.beta2 * v + (1.0 - config_.beta2) * gi * gi;
        update = lr * (m / bc1) / (std::sqrt(v / bc2) + config_.epsilon);
      } else {
        update = lr * gi;
      }
      w[i] -= update + decay * w[i];
    }
    w.clear_grad();
  }
}

}  // namespace kbqa
