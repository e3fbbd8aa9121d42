#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tokalign/autodiff.hpp"

namespace tokalign::ad {

/// Builds a scalar loss on `tape` from parameter leaves bound to `params`.
using ScalarFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  /// Largest ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8) over
  /// parameter blocks. Unlike the per-coordinate figure it is not dominated by
  /// coordinates whose gradient sits at the finite-difference round-off level.
  double max_block_error = 0.0;
  /// Parameter block and flat coordinate of the worst entry.
  std::size_t worst_param = 0;
  Index worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients with the fourth-order central difference
/// (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> params,
                           double step = 1e-3);

/// Several scalar outputs of one graph, checked together so each finite
/// difference costs a single evaluation.
using MultiFunction = std::function<std::vector<Var>(Tape& tape, std::span<const Var> params)>;
std::vector<GradCheckResult> grad_check(const MultiFunction& f, std::span<const Matrix> params, double step = 1e-3);

/// Analytic gradients of `f` at `params`, one matrix per parameter.
std::vector<Matrix> analytic_gradients(const ScalarFunction& f, std::span<const Matrix> params);

}  // namespace tokalign::ad
