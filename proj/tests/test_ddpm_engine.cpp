// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "seqlidar/diffusion.hpp"
#include "seqlidar/errors.hpp"
#include "seqlidar/grad_check.hpp"
#include "seqlidar/ops.hpp"

using namespace seqlidar;
namespace o = seqlidar::ops;

namespace {

Tensor<double> scalar_tensor(double v) { return Tensor<double>(Shape{1}, v); }

template <typename T>
bool same_values(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.data(), b.data());
}

// Long double trig as an independent reference for the schedule.
long double ref_alpha(long double t) { return std::cos(std::numbers::pi_v<long double> * t / 2); }
long double ref_sigma(long double t) { return std::sin(std::numbers::pi_v<long double> * t / 2); }

}  // namespace

TEST(Schedule, EndpointsAndQuarter) {
  EXPECT_EQ(schedule_at(0.0).alpha, 1.0);
  EXPECT_EQ(schedule_at(0.0).sigma, 0.0);
  EXPECT_EQ(schedule_at(1.0).alpha, 0.0);
  EXPECT_EQ(schedule_at(1.0).sigma, 1.0);
  const auto q = schedule_at(0.25);
  EXPECT_NEAR(q.alpha, 0.92387953251128674, 1e-15);
  EXPECT_NEAR(q.sigma, 0.38268343236508977, 1e-15);
  EXPECT_NEAR(q.alpha, static_cast<double>(ref_alpha(0.25L)), 1e-15);
}

TEST(Schedule, UnitNormOnDenseGrid) {
  for (int i = 0; i <= 10000; ++i) {
    const auto [a, s] = schedule_at(i / 10000.0);
    ASSERT_NEAR(a * a + s * s, 1.0, 1e-12) << i;
  }
}

TEST(Schedule, RejectsOutOfRange) {
  EXPECT_THROW(schedule_at(-1e-9), RangeError);
  EXPECT_THROW(schedule_at(1.0 + 1e-9), RangeError);
  EXPECT_THROW(schedule_at(std::nan("")), RangeError);
}

TEST(ForwardDiffuse, ScalarExampleAndEndpoints) {
  const auto x = scalar_tensor(2.0), eps = scalar_tensor(-1.0);
  EXPECT_NEAR(forward_diffuse(x, 0.5, eps)[0], 0.70710678118654752, 1e-15);
  EXPECT_EQ(forward_diffuse(x, 0.0, eps)[0], 2.0);
  EXPECT_EQ(forward_diffuse(x, 1.0, eps)[0], -1.0);
  EXPECT_THROW(forward_diffuse(x, 0.5, Tensor<double>(Shape{2})), DimensionError);
}

TEST(ForwardDiffuse, MarginalMomentsMatch) {
  std::mt19937_64 rng(5);
  const std::size_t n = 100000;
  const auto eps = Tensor<double>::randn({n}, rng);
  const Tensor<double> x({n}, 0.7);
  const double t = 0.4;
  const auto xt = forward_diffuse(x, t, eps);
  double m = 0, m2 = 0;
  for (double v : xt.data()) m += v;
  m /= n;
  for (double v : xt.data()) m2 += (v - m) * (v - m);
  const double var = m2 / (n - 1);
  const auto [a, s] = schedule_at(t);
  EXPECT_NEAR(m, a * 0.7, 3 * s / std::sqrt(n));
  EXPECT_NEAR(var, s * s, 3 * s * s * std::sqrt(2.0 / (n - 1)));
}

TEST(Transition, ClosedFormValues) {
  const auto tr = transition_params(0.25, 0.5);
  const long double as = ref_alpha(0.25L), ss = ref_sigma(0.25L), at = ref_alpha(0.5L), st = ref_sigma(0.5L);
  const long double ats = at / as;
  EXPECT_NEAR(tr.alpha_ts, static_cast<double>(ats), 1e-15);
  EXPECT_NEAR(tr.sigma2_ts, static_cast<double>(st * st - ats * ats * ss * ss), 1e-15);
  EXPECT_NEAR(tr.alpha_ts, 0.7653669, 1e-7);
  EXPECT_NEAR(tr.sigma2_ts, 0.4142136, 1e-7);

  const auto z = transition_params(0.0, 0.3);
  EXPECT_DOUBLE_EQ(z.alpha_ts, schedule_at(0.3).alpha);
  EXPECT_DOUBLE_EQ(z.sigma2_ts, std::pow(schedule_at(0.3).sigma, 2));
}

TEST(Transition, OrderingErrors) {
  EXPECT_THROW(transition_params(0.5, 0.5), OrderingError);
  EXPECT_THROW(transition_params(0.6, 0.5), OrderingError);
  EXPECT_THROW(posterior_step(scalar_tensor(0), scalar_tensor(0), 0.6, 0.5, scalar_tensor(0)), OrderingError);
}

TEST(Transition, CompositionIdentitiesOnRandomTriples) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (int k = 0; k < 2000; ++k) {
    double v[3] = {u(rng), u(rng), u(rng)};
    std::sort(v, v + 3);
    if (!(v[0] < v[1] && v[1] < v[2])) continue;
    const double s = v[0], m = v[1], t = v[2];
    const auto ts = transition_params(s, t), tm = transition_params(m, t), ms = transition_params(s, m);
    const auto [as, ss] = schedule_at(s);
    const auto [at, st] = schedule_at(t);
    ASSERT_NEAR(tm.alpha_ts * ms.alpha_ts, ts.alpha_ts, 1e-12);
    ASSERT_NEAR(ts.alpha_ts * as, at, 1e-12);
    ASSERT_NEAR(ts.alpha_ts * ts.alpha_ts * ss * ss + ts.sigma2_ts, st * st, 1e-12);
  }
}

TEST(Transition, MonteCarloCompositionMatchesDirectMarginal) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n01;
  const double x = 0.8, s = 0.3, t = 0.7;
  const auto [as, ss] = schedule_at(s);
  const auto tr = transition_params(s, t);
  const int n = 100000;
  double m = 0, m2 = 0;
  std::vector<double> draws(n);
  for (auto& d : draws) {
    const double xs = as * x + ss * n01(rng);
    d = tr.alpha_ts * xs + std::sqrt(tr.sigma2_ts) * n01(rng);
    m += d;
  }
  m /= n;
  for (double d : draws) m2 += (d - m) * (d - m);
  const double var = m2 / (n - 1);
  const auto [at, st] = schedule_at(t);
  EXPECT_NEAR(m, at * x, 3 * st / std::sqrt(n));
  EXPECT_NEAR(var, st * st, 3 * st * st * std::sqrt(2.0 / (n - 1)));
}

TEST(EpsToX, InvertsForwardDiffusion) {
  const auto x = scalar_tensor(2.0), eps = scalar_tensor(-1.0);
  const auto xt = forward_diffuse(x, 0.5, eps);
  EXPECT_NEAR(eps_to_x(xt, eps, 0.5)[0], 2.0, 4e-16);
  EXPECT_EQ(eps_to_x(scalar_tensor(0.3), scalar_tensor(17.0), 0.0)[0], 0.3);
  // t = 1: alpha clamps to the floor.
  EXPECT_NEAR(eps_to_x(scalar_tensor(0.5), scalar_tensor(0.25), 1.0, 1e-4)[0], 0.25 / 1e-4, 1e-9);
}

TEST(EpsToX, RoundTripFloat64AcrossGrid) {
  std::mt19937_64 rng(3);
  const auto x = Tensor<double>::randn({64}, rng);
  const auto eps = Tensor<double>::randn({64}, rng);
  for (int i = 0; i < 1000; ++i) {
    const double t = i / 1000.0;
    if (schedule_at(t).alpha < kDefaultTFloor) continue;
    const auto back = eps_to_x(forward_diffuse(x, t, eps), eps, t);
    for (std::size_t k = 0; k < x.numel(); ++k) {
      // Exact up to rounding of the two affine maps, which grows as 1/alpha.
      ASSERT_NEAR(back[k], x[k], 8e-16 * (1.0 + std::abs(eps[k])) / schedule_at(t).alpha) << t;
    }
  }
}

TEST(Posterior, ZeroTargetReturnsEstimateExactly) {
  std::mt19937_64 rng(4);
  const auto xt = Tensor<double>::randn({10}, rng);
  const auto xh = Tensor<double>::randn({10}, rng);
  const auto noise = Tensor<double>::randn({10}, rng);
  EXPECT_TRUE(same_values(posterior_step(xt, xh, 0.0, 0.2, noise), xh));
}

TEST(Posterior, CoefficientSumAtQuarterHalf) {
  const auto out = posterior_step(scalar_tensor(1.0), scalar_tensor(1.0), 0.25, 0.5, scalar_tensor(0.0))[0];
  const long double as = ref_alpha(0.25L), ss = ref_sigma(0.25L), at = ref_alpha(0.5L), st = ref_sigma(0.5L);
  const long double ats = at / as, s2ts = st * st - ats * ats * ss * ss;
  const long double expected = (ats * ss * ss + as * s2ts) / (st * st);
  EXPECT_NEAR(out, static_cast<double>(expected), 1e-15);
  EXPECT_NEAR(out, 0.98953763, 1e-8);
}

TEST(Posterior, MonteCarloMatchesMarginalOfTarget) {
  // x_t ~ q(x_t | x) then x_s ~ p(x_s | x_t, x) must be distributed as q(x_s | x).
  std::mt19937_64 rng(8);
  const std::size_t n = 100000;
  const double x = -0.4, s = 0.35, t = 0.6;
  const Tensor<double> xv({n}, x);
  const auto xt = forward_diffuse(xv, t, Tensor<double>::randn({n}, rng));
  const auto xs = posterior_step(xt, xv, s, t, Tensor<double>::randn({n}, rng));
  double m = 0, m2 = 0;
  for (double v : xs.data()) m += v;
  m /= n;
  for (double v : xs.data()) m2 += (v - m) * (v - m);
  const double var = m2 / (n - 1);
  const auto [as, ss] = schedule_at(s);
  EXPECT_NEAR(m, as * x, 3 * ss / std::sqrt(n));
  EXPECT_NEAR(var, ss * ss, 3 * ss * ss * std::sqrt(2.0 / (n - 1)));
}

TEST(TrainLoss, OracleModelGivesZero) {
  std::mt19937_64 data_rng(1);
  const auto x0 = Tensor<double>::randn({3, 2, 2, 4, 8}, data_rng);
  // Recover eps from x_t using the t draw made inside train_loss.
  EpsModel<double> oracle = [&](const Var<double>& xt, const std::vector<double>& ts) {
    Tensor<double> eps(xt.shape());
    const std::size_t per = xt.numel() / ts.size();
    for (std::size_t b = 0; b < ts.size(); ++b) {
      const auto [a, s] = schedule_at(ts[b]);
      for (std::size_t k = b * per; k < (b + 1) * per; ++k) eps[k] = (xt.value()[k] - a * x0[k]) / s;
    }
    return Var<double>(eps);
  };
  std::mt19937_64 rng(2);
  LossDraw draw;
  const auto loss = train_loss(oracle, x0, rng, kDefaultTFloor, &draw);
  EXPECT_LT(loss.value()[0], 1e-20);
  ASSERT_EQ(draw.t.size(), 3u);
  for (double t : draw.t) {
    EXPECT_GE(t, kDefaultTFloor);
    EXPECT_LT(t, 1.0 - kDefaultTFloor);
  }
}

TEST(TrainLoss, ZeroModelGivesUnitSecondMoment) {
  const auto x0 = Tensor<double>({4, 1, 2, 16, 64}, 0.5);
  EpsModel<double> zero = [](const Var<double>& xt, const std::vector<double>&) {
    return Var<double>(Tensor<double>(xt.shape(), 0.0));
  };
  std::mt19937_64 rng(3);
  const double loss = train_loss(zero, x0, rng).value()[0];
  const double n = static_cast<double>(x0.numel());
  EXPECT_NEAR(loss, 1.0, 3 * std::sqrt(2.0 / n));
}

TEST(TrainLoss, ShapeMismatchRaises) {
  EpsModel<double> bad = [](const Var<double>&, const std::vector<double>&) {
    return Var<double>(Tensor<double>(Shape{1}, 0.0));
  };
  std::mt19937_64 rng(0);
  EXPECT_THROW(train_loss(bad, Tensor<double>({2, 3}, 0.0), rng), DimensionError);
}

TEST(TrainLoss, GradientMatchesFiniteDifferencesOnToyPredictor) {
  std::mt19937_64 data_rng(9);
  const auto x0 = Tensor<double>::randn({2, 12}, data_rng);
  Var<double> w(Tensor<double>(Shape{1, 1}, 0.3), true);
  Var<double> b(Tensor<double>(Shape{1}, -0.2), true);
  EpsModel<double> toy = [&](const Var<double>& xt, const std::vector<double>&) {
    return o::reshape(o::linear(o::reshape(xt, {24, 1}), w, b), {2, 12});
  };
  auto f = [&]() {
    std::mt19937_64 rng(77);
    return train_loss(toy, x0, rng);
  };
  EXPECT_LT(grad_check_param(f, w).max_rel_error, 1e-4);
  EXPECT_LT(grad_check_param(f, b).max_rel_error, 1e-4);
}

TEST(Sampler, SingleStepIsOneDeterministicJump) {
  const Shape shape{1, 2, 2, 4, 8};
  NoisePredictor<double> half = [](const Tensor<double>& xt, double) {
    Tensor<double> e(xt.shape());
    for (std::size_t k = 0; k < e.numel(); ++k) e[k] = 0.9999 * xt[k] + 1e-5;
    return e;
  };
  SamplerConfig cfg;
  cfg.steps = 1;
  cfg.seed = 42;
  const auto out = sample(half, shape, cfg);
  std::mt19937_64 rng(42);
  const auto x1 = Tensor<double>::randn(shape, rng);
  const auto jump = eps_to_x(x1, half(x1, 1.0), 1.0);
  for (std::size_t k = 0; k < out.numel(); ++k) EXPECT_EQ(out[k], std::clamp(jump[k], -1.0, 1.0));
}

TEST(Sampler, DeterministicGivenSeed) {
  const Shape shape{1, 2, 2, 4, 8};
  NoisePredictor<float> pred = [](const Tensor<float>& xt, double t) {
    Tensor<float> e(xt.shape());
    for (std::size_t k = 0; k < e.numel(); ++k) e[k] = static_cast<float>(std::sin(xt[k] + t));
    return e;
  };
  SamplerConfig cfg;
  cfg.steps = 16;
  cfg.seed = 5;
  const auto a = sample(pred, shape, cfg), b = sample(pred, shape, cfg);
  EXPECT_TRUE(same_values(a, b));
  cfg.seed = 6;
  EXPECT_FALSE(same_values(sample(pred, shape, cfg), a));
  for (float v : a.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Sampler, OracleInversionRecoversTarget) {
  const Shape shape{1, 2, 2, 16, 64};
  std::mt19937_64 rng(12);
  Tensor<double> x(shape);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : x.data()) v = u(rng);
  NoisePredictor<double> oracle = [&](const Tensor<double>& xt, double t) {
    const auto [a, s] = schedule_at(t);
    Tensor<double> e(xt.shape());
    for (std::size_t k = 0; k < e.numel(); ++k) e[k] = (xt[k] - a * x[k]) / s;
    return e;
  };
  SamplerConfig cfg;
  cfg.seed = 99;
  const auto out = sample(oracle, shape, cfg);
  double worst = 0;
  for (std::size_t k = 0; k < out.numel(); ++k) worst = std::max(worst, std::abs(out[k] - x[k]));
  EXPECT_LT(worst, 1e-3);
}

TEST(Sampler, NonFiniteStateRaisesWithStep) {
  NoisePredictor<double> nan_late = [](const Tensor<double>& xt, double t) {
    return Tensor<double>(xt.shape(), t < 0.5 ? std::nan("") : 0.0);
  };
  SamplerConfig cfg;
  cfg.steps = 8;
  try {
    sample(nan_late, {1, 4}, cfg);
    FAIL() << "expected divergence";
  } catch (const SamplerDivergence& e) {
    // t = 3/8 is the first grid point below one half: iteration index 5.
    EXPECT_EQ(e.step(), 5);
  }
  cfg.steps = 0;
  EXPECT_THROW(sample(nan_late, {1, 4}, cfg), ConfigError);
}
