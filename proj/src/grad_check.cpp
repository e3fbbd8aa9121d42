#include "tokalign/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tokalign/errors.hpp"

namespace tokalign::ad {

namespace {

std::vector<double> evaluate(const MultiFunction& f, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.constant(p));
  std::vector<double> out;
  for (const Var& v : f(tape, vars)) out.push_back(v.scalar());
  return out;
}

MultiFunction as_multi(const ScalarFunction& f) {
  return [&f](Tape& tape, std::span<const Var> params) { return std::vector<Var>{f(tape, params)}; };
}

void record(GradCheckResult& r, std::size_t p, Index i, double a, double numeric) {
  const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
  if (err > r.max_relative_error || (p == 0 && i == 0)) {
    r.max_relative_error = std::max(r.max_relative_error, err);
    r.worst_param = p;
    r.worst_index = i;
    r.worst_analytic = a;
    r.worst_numeric = numeric;
  }
}

}  // namespace

std::vector<Matrix> analytic_gradients(const ScalarFunction& f, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.parameter(p));
  const Var loss = f(tape, vars);
  Gradients grads = tape.backward(loss);
  std::vector<Matrix> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(std::move(grads.at(v.id())));
  return out;
}

std::vector<GradCheckResult> grad_check(const MultiFunction& f, std::span<const Matrix> params, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  // analytic[k][p]: gradient of output k w.r.t. parameter p
  std::vector<std::vector<Matrix>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& p : params) vars.push_back(tape.parameter(p));
    for (const Var& out : f(tape, vars)) {
      Gradients grads = tape.backward(out);
      std::vector<Matrix> g;
      for (const Var& v : vars) g.push_back(grads.at(v.id()));
      analytic.push_back(std::move(g));
    }
  }
  std::vector<GradCheckResult> results(analytic.size());
  std::vector<Matrix> work(params.begin(), params.end());
  for (std::size_t p = 0; p < work.size(); ++p) {
    std::vector<Matrix> numeric_block(results.size(), Matrix(work[p].rows(), work[p].cols()));
    for (Index i = 0; i < work[p].size(); ++i) {
      double& x = work[p].data()[i];
      const double saved = x;
      std::vector<double> at[4];
      const double offsets[4] = {-2.0, -1.0, 1.0, 2.0};
      for (int j = 0; j < 4; ++j) {
        x = saved + offsets[j] * step;
        at[j] = evaluate(f, work);
      }
      x = saved;
      for (std::size_t k = 0; k < results.size(); ++k) {
        const double numeric = (8.0 * (at[2][k] - at[1][k]) - (at[3][k] - at[0][k])) / (12.0 * step);
        record(results[k], p, i, analytic[k][p].data()[i], numeric);
        numeric_block[k].data()[i] = numeric;
      }
    }
    for (std::size_t k = 0; k < results.size(); ++k) {
      const Matrix& a = analytic[k][p];
      const double err = (a - numeric_block[k]).norm() / std::max({a.norm(), numeric_block[k].norm(), 1e-8});
      results[k].max_block_error = std::max(results[k].max_block_error, err);
    }
  }
  return results;
}

GradCheckResult grad_check(const ScalarFunction& f, std::span<const Matrix> params, double step) {
  return grad_check(as_multi(f), params, step).front();
}

}  // namespace tokalign::ad
