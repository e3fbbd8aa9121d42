#include "tokalign/optim.hpp"

#include <cmath>

#include "tokalign/errors.hpp"

namespace tokalign {

void optimizer_step(std::span<ad::Matrix* const> params, std::span<const ad::Matrix> grads,
                    OptimizerState& state, const OptimizerConfig& config) {
  if (params.size() != grads.size()) throw DimensionError("optimizer_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols())
      throw DimensionError("optimizer_step: gradient shape differs from parameter " + std::to_string(i));

  const double lr = config.learning_rate;
  if (config.kind == OptimizerKind::SGD) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (config.weight_decay != 0.0) *params[i] *= 1.0 - lr * config.weight_decay;
      *params[i] -= lr * grads[i];
    }
    ++state.step;
    return;
  }

  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.push_back(ad::Matrix::Zero(params[i]->rows(), params[i]->cols()));
      state.v.push_back(ad::Matrix::Zero(params[i]->rows(), params[i]->cols()));
    }
  } else if (state.m.size() != params.size()) {
    throw ContractError("optimizer_step: state was initialised for a different parameter set");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Matrix& p = *params[i];
    ad::Matrix& m = state.m[i];
    ad::Matrix& v = state.v[i];
    m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
    v = config.beta2 * v + (1.0 - config.beta2) * grads[i].cwiseAbs2();
    if (config.weight_decay != 0.0) p *= 1.0 - lr * config.weight_decay;
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config.eps);
  }
}

}  // namespace tokalign
