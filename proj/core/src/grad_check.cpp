// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace seqlidar {

namespace {

double eval_scalar(const std::function<Var<double>()>& f) {
  NoGradGuard guard;
  Var<double> out = f();
  if (out.numel() != 1) throw ContractError("grad_check: function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite function value");
  return v;
}

std::vector<std::size_t> pick_coords(std::size_t n, const GradCheckOptions& opt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (opt.max_coords == 0 || opt.max_coords >= n) return idx;
  std::mt19937_64 rng(opt.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opt.max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

GradCheckResult compare(const std::function<Var<double>()>& f, Tensor<double>& values, const Tensor<double>& analytic,
                        const GradCheckOptions& opt) {
  GradCheckResult result;
  const double h = opt.step;
  const double f0 = eval_scalar(f);
  for (std::size_t i : pick_coords(values.numel(), opt)) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = eval_scalar(f);
    values[i] = orig - h;
    const double fm = eval_scalar(f);
    values[i] = orig;
    const double forward = (fp - f0) / h;
    const double backward_slope = (f0 - fm) / h;
    const double central = (fp - fm) / (2.0 * h);
    if (std::abs(forward - backward_slope) > opt.kink_tolerance * std::max(1.0, std::abs(central))) {
      ++result.skipped;
      continue;
    }
    const double a = analytic.empty() ? 0.0 : analytic[i];
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - central) / std::max(1.0, std::abs(a)));
    ++result.checked;
  }
  return result;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           const GradCheckOptions& options) {
  Var<double> input(x, true);
  Var<double> loss = f(input);
  if (!std::isfinite(loss.value()[0])) throw EvaluationError("grad_check: non-finite function value");
  backward(loss);
  const Tensor<double> analytic = input.grad();
  return compare([&] { return f(input); }, input.value_mut(), analytic, options);
}

GradCheckResult grad_check_param(const std::function<Var<double>()>& f, Var<double>& param,
                                 const GradCheckOptions& options) {
  param.zero_grad();
  Var<double> loss = f();
  if (!std::isfinite(loss.value()[0])) throw EvaluationError("grad_check: non-finite function value");
  backward(loss);
  const Tensor<double> analytic = param.grad();
  return compare(f, param.value_mut(), analytic, options);
}

}  // namespace seqlidar
