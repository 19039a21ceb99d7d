// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "seqlidar/autograd.hpp"
#include "seqlidar/tensor.hpp"

namespace seqlidar {

/// alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2) over t in [0, 1].
struct ScheduleValues {
  double alpha;
  double sigma;
};
ScheduleValues schedule_at(double t);

/// q(x_t | x_s) = N(alpha_ts x_s, sigma2_ts I) for s < t.
struct Transition {
  double alpha_ts;
  double sigma2_ts;
};
Transition transition_params(double s, double t);

/// Weights of the Gaussian posterior p(x_s | x_t, x):
/// mean = c_xt * x_t + c_x * x, variance as given.
struct PosteriorCoefficients {
  double c_xt;
  double c_x;
  double variance;
};
PosteriorCoefficients posterior_coefficients(double s, double t);

inline constexpr double kDefaultTFloor = 1e-4;

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x, double t, const Tensor<T>& eps);

/// x_hat = (x_t - sigma_t eps_hat) / max(alpha_t, t_floor).
template <typename T>
Tensor<T> eps_to_x(const Tensor<T>& x_t, const Tensor<T>& eps_hat, double t, double t_floor = kDefaultTFloor);

/// Draw from the posterior with the supplied standard normal noise.
template <typename T>
Tensor<T> posterior_step(const Tensor<T>& x_t, const Tensor<T>& x_hat, double s, double t, const Tensor<T>& noise);

struct SamplerConfig {
  int steps = 256;
  std::uint64_t seed = 0;
  double t_floor = kDefaultTFloor;
  // Clamp each intermediate x_hat to the data range [-1, 1].
  bool clip_denoised = true;
};

/// eps_hat = predictor(x_t, t) with a scalar t shared by the whole batch.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>& x_t, double t)>;

/// Ancestral sampling on the uniform grid t_i = i / steps from t = 1 down to 0.
/// Throws SamplerDivergence on a non-finite intermediate state.
template <typename T>
Tensor<T> sample(const NoisePredictor<T>& predictor, const Shape& shape, const SamplerConfig& cfg);

/// Differentiable model used in training: eps_hat = model(x_t, t per batch row).
template <typename T>
using EpsModel = std::function<Var<T>(const Var<T>& x_t, const std::vector<double>& t)>;

struct LossDraw {
  std::vector<double> t;
};

/// mean ||eps - eps_hat||^2 with t ~ U(t_floor, 1 - t_floor) and eps ~ N(0, I)
/// per batch row (first axis of x0).
template <typename T>
Var<T> train_loss(const EpsModel<T>& model, const Tensor<T>& x0, std::mt19937_64& rng, double t_floor = kDefaultTFloor,
                  LossDraw* draw = nullptr);

}  // namespace seqlidar
