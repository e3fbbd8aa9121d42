#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tokalign/autodiff.hpp"

namespace tokalign {

enum class OptimizerKind { AdamW, SGD };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled: applied as p -= lr * weight_decay * p before the gradient step.
  double weight_decay = 0.0;
};

/// First and second moment buffers; empty until the first step.
struct OptimizerState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  std::int64_t step = 0;
};

/// Updates `params` in place from `grads` (same order and shapes).
void optimizer_step(std::span<ad::Matrix* const> params, std::span<const ad::Matrix> grads,
                    OptimizerState& state, const OptimizerConfig& config);

}  // namespace tokalign
