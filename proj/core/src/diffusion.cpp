// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "seqlidar/errors.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar {

ScheduleValues schedule_at(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw RangeError("schedule_at: t = " + std::to_string(t) + " outside [0, 1]");
  // cos(pi/2) rounds to 6e-17; pin both endpoints.
  if (t == 0.0) return {1.0, 0.0};
  if (t == 1.0) return {0.0, 1.0};
  const double a = 0.5 * std::numbers::pi * t;
  return {std::cos(a), std::sin(a)};
}

Transition transition_params(double s, double t) {
  if (!(s < t)) throw OrderingError("transition_params: need s < t, got s = " + std::to_string(s) + ", t = " + std::to_string(t));
  const auto [as, ss] = schedule_at(s);
  const auto [at, st] = schedule_at(t);
  if (!(as > 0.0)) throw RangeError("transition_params: alpha_s must be positive");
  const double ats = at / as;
  return {ats, st * st - ats * ats * ss * ss};
}

PosteriorCoefficients posterior_coefficients(double s, double t) {
  const auto [ats, s2ts] = transition_params(s, t);
  const auto [as, ss] = schedule_at(s);
  const double st2 = std::pow(schedule_at(t).sigma, 2);
  if (!(st2 > 0.0)) throw RangeError("posterior: sigma_t must be positive");
  const double ss2 = ss * ss;
  return {ats * ss2 / st2, as * s2ts / st2, s2ts * ss2 / st2};
}

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x, double t, const Tensor<T>& eps) {
  require_same(x, eps, "forward_diffuse");
  const auto [a, s] = schedule_at(t);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = static_cast<T>(a * x[i] + s * eps[i]);
  return out;
}

template <typename T>
Tensor<T> eps_to_x(const Tensor<T>& x_t, const Tensor<T>& eps_hat, double t, double t_floor) {
  require_same(x_t, eps_hat, "eps_to_x");
  const auto [a, s] = schedule_at(t);
  const double denom = std::max(a, t_floor);
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < x_t.numel(); ++i) out[i] = static_cast<T>((x_t[i] - s * eps_hat[i]) / denom);
  return out;
}

template <typename T>
Tensor<T> posterior_step(const Tensor<T>& x_t, const Tensor<T>& x_hat, double s, double t, const Tensor<T>& noise) {
  require_same(x_t, x_hat, "posterior_step");
  require_same(x_t, noise, "posterior_step");
  if (s == 0.0) {
    if (!(t > 0.0)) throw OrderingError("posterior_step: need s < t");
    return x_hat;
  }
  const auto c = posterior_coefficients(s, t);
  const double sd = std::sqrt(std::max(0.0, c.variance));
  Tensor<T> out(x_t.shape());
  for (std::size_t i = 0; i < x_t.numel(); ++i) out[i] = static_cast<T>(c.c_xt * x_t[i] + c.c_x * x_hat[i] + sd * noise[i]);
  return out;
}

template <typename T>
Tensor<T> sample(const NoisePredictor<T>& predictor, const Shape& shape, const SamplerConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("sampler: steps must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  Tensor<T> x = Tensor<T>::randn(shape, rng);
  for (int i = cfg.steps; i >= 1; --i) {
    const double t = static_cast<double>(i) / cfg.steps;
    const double s = static_cast<double>(i - 1) / cfg.steps;
    const Tensor<T> eps_hat = predictor(x, t);
    if (eps_hat.shape() != shape) throw DimensionError("sampler: predictor returned " + shape_str(eps_hat.shape()));
    Tensor<T> x_hat = eps_to_x(x, eps_hat, t, cfg.t_floor);
    if (cfg.clip_denoised) {
      for (auto& v : x_hat.data()) v = std::clamp(v, T{-1}, T{1});
    }
    if (i == 1) {
      x = std::move(x_hat);
    } else {
      const Tensor<T> noise = Tensor<T>::randn(shape, rng);
      x = posterior_step(x, x_hat, s, t, noise);
    }
    if (!x.all_finite()) throw SamplerDivergence(cfg.steps - i, "non-finite state at t = " + std::to_string(s));
  }
  for (auto& v : x.data()) v = std::clamp(v, T{-1}, T{1});
  return x;
}

template <typename T>
Var<T> train_loss(const EpsModel<T>& model, const Tensor<T>& x0, std::mt19937_64& rng, double t_floor, LossDraw* draw) {
  if (x0.rank() < 1) throw DimensionError("train_loss: batch needs a leading axis");
  const std::size_t batch = x0.dim(0);
  const std::size_t per = x0.numel() / batch;
  std::uniform_real_distribution<double> ut(t_floor, 1.0 - t_floor);
  std::vector<double> ts(batch);
  for (auto& t : ts) t = ut(rng);
  const Tensor<T> eps = Tensor<T>::randn(x0.shape(), rng);
  Tensor<T> xt(x0.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto [a, s] = schedule_at(ts[b]);
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) xt[k] = static_cast<T>(a * x0[k] + s * eps[k]);
  }
  Var<T> eps_hat = model(Var<T>(std::move(xt)), ts);
  if (eps_hat.shape() != eps.shape()) {
    throw DimensionError("train_loss: model output " + shape_str(eps_hat.shape()) + " does not match noise " +
                         shape_str(eps.shape()));
  }
  if (draw) draw->t = ts;
  return ops::mse(eps_hat, Var<T>(eps));
}

#define SEQLIDAR_INSTANTIATE_DIFFUSION(T)                                                                    \
  template Tensor<T> forward_diffuse<T>(const Tensor<T>&, double, const Tensor<T>&);                        \
  template Tensor<T> eps_to_x<T>(const Tensor<T>&, const Tensor<T>&, double, double);                       \
  template Tensor<T> posterior_step<T>(const Tensor<T>&, const Tensor<T>&, double, double, const Tensor<T>&); \
  template Tensor<T> sample<T>(const NoisePredictor<T>&, const Shape&, const SamplerConfig&);               \
  template Var<T> train_loss<T>(const EpsModel<T>&, const Tensor<T>&, std::mt19937_64&, double, LossDraw*);

SEQLIDAR_INSTANTIATE_DIFFUSION(float)
SEQLIDAR_INSTANTIATE_DIFFUSION(double)

}  // namespace seqlidar
