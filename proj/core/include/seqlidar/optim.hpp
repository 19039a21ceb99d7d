// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "seqlidar/autograd.hpp"

namespace seqlidar {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer over a fixed parameter list. Moments are public
/// state so training can be checkpointed and resumed exactly.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      const Tensor<T>& g = params_[i].grad();
      Tensor<T>& w = params_[i].value_mut();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      for (std::size_t k = 0; k < w.numel(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(config_.beta1 * m[k] + (1.0 - config_.beta1) * gk);
        v[k] = static_cast<T>(config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk);
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        w[k] = static_cast<T>(w[k] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
  }

  std::size_t steps() const noexcept { return steps_; }
  void set_steps(std::size_t s) noexcept { steps_ = s; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  const AdamConfig& config() const noexcept { return config_; }
  void set_lr(double lr) noexcept { config_.lr = lr; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig config_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::size_t steps_ = 0;
};

/// Exponential moving average of parameter values. The effective decay is
/// min(decay, (1 + step) / (10 + step)) so short runs are not dominated by the
/// initial weights.
template <typename T>
class Ema {
 public:
  Ema(const std::vector<Var<T>>& params, double decay) : decay_(decay) {
    for (const auto& p : params) shadow_.push_back(p.value());
  }

  void update(const std::vector<Var<T>>& params, std::size_t step) {
    const double d = std::min(decay_, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<T>& w = params[i].value();
      Tensor<T>& s = shadow_[i];
      for (std::size_t k = 0; k < w.numel(); ++k) s[k] = static_cast<T>(d * s[k] + (1.0 - d) * w[k]);
    }
  }

  double decay() const noexcept { return decay_; }
  std::vector<Tensor<T>>& shadow() noexcept { return shadow_; }
  const std::vector<Tensor<T>>& shadow() const noexcept { return shadow_; }

 private:
  double decay_;
  std::vector<Tensor<T>> shadow_;
};

}  // namespace seqlidar
