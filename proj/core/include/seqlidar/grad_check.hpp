// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "seqlidar/autograd.hpp"

namespace seqlidar {

struct GradCheckResult {
  // max over checked coordinates of |analytic - numeric| / max(1, |analytic|)
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates where forward and backward one-sided differences disagree
  // (a kink at the probe point); central differences are meaningless there.
  std::size_t skipped = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // One-sided slopes differing by more than this (relative to max(1,|slope|))
  // mark a coordinate as non-differentiable.
  double kink_tolerance = 1e-2;
  // 0 checks every coordinate; otherwise a seeded subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Compares backward() against central differences of f around x.
GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           const GradCheckOptions& options = {});

/// Same check for a parameter captured by `f`; the parameter is perturbed in
/// place and restored.
GradCheckResult grad_check_param(const std::function<Var<double>()>& f, Var<double>& param,
                                 const GradCheckOptions& options = {});

}  // namespace seqlidar
