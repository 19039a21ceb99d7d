// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <memory>

#include "ops_internal.hpp"
#include "seqlidar/gemm.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar::ops {

using detail::accumulate;
using detail::require_rank;

template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("group_norm: input rank < 2");
  const std::size_t n = s[0];
  const std::size_t c = s[1];
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible by " + std::to_string(groups) +
                      " groups");
  }
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("group_norm: affine parameters must have C elements");
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t cpg = c / groups;
  const std::size_t group_size = cpg * inner;

  // Two-pass statistics per (sample, group), accumulated in double.
  auto mean = std::make_shared<std::vector<double>>(n * groups);
  auto rstd = std::make_shared<std::vector<double>>(n * groups);
  Tensor<T> out(s);
  const T* xv = x.value().ptr();
  for (std::size_t i = 0; i < n * groups; ++i) {
    const T* base = xv + i * group_size;
    double acc = 0.0;
    for (std::size_t j = 0; j < group_size; ++j) acc += base[j];
    const double mu = acc / static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t j = 0; j < group_size; ++j) {
      const double d = base[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(group_size);
    const double r = 1.0 / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*rstd)[i] = r;
    const std::size_t g = i % groups;
    T* dst = out.ptr() + i * group_size;
    for (std::size_t cc = 0; cc < cpg; ++cc) {
      const std::size_t ch = g * cpg + cc;
      const double ga = gamma.value()[ch];
      const double be = beta.value()[ch];
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t k = cc * inner + j;
        dst[k] = static_cast<T>((base[k] - mu) * r * ga + be);
      }
    }
  }

  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return make_result<T>(
      std::move(out), {x, gamma, beta}, "group_norm",
      [nx, ng, nb, n, groups, cpg, inner, group_size, mean, rstd](const Tensor<T>& gy) {
        const T* xv = nx->value.ptr();
        std::vector<double> dxhat(group_size);
        for (std::size_t i = 0; i < n * groups; ++i) {
          const std::size_t g = i % groups;
          const double mu = (*mean)[i];
          const double r = (*rstd)[i];
          const T* base = xv + i * group_size;
          const T* gbase = gy.ptr() + i * group_size;
          double sum_dxhat = 0.0;
          double sum_dxhat_xhat = 0.0;
          for (std::size_t cc = 0; cc < cpg; ++cc) {
            const std::size_t ch = g * cpg + cc;
            const double ga = ng->value[ch];
            double dgamma = 0.0;
            double dbeta = 0.0;
            for (std::size_t j = 0; j < inner; ++j) {
              const std::size_t k = cc * inner + j;
              const double xhat = (base[k] - mu) * r;
              const double gv = gbase[k];
              dgamma += gv * xhat;
              dbeta += gv;
              dxhat[k] = gv * ga;
              sum_dxhat += dxhat[k];
              sum_dxhat_xhat += dxhat[k] * xhat;
            }
            if (ng->requires_grad) ng->grad_buffer()[ch] += static_cast<T>(dgamma);
            if (nb->requires_grad) nb->grad_buffer()[ch] += static_cast<T>(dbeta);
          }
          if (nx->requires_grad) {
            T* dx = nx->grad_buffer().ptr() + i * group_size;
            const double inv_m = 1.0 / static_cast<double>(group_size);
            const double m1 = sum_dxhat * inv_m;
            const double m2 = sum_dxhat_xhat * inv_m;
            for (std::size_t k = 0; k < group_size; ++k) {
              const double xhat = (base[k] - mu) * r;
              dx[k] += static_cast<T>(r * (dxhat[k] - m1 - xhat * m2));
            }
          }
        }
      });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  require_rank(q, 3, "attention");
  require_rank(k, 3, "attention");
  require_rank(v, 3, "attention");
  const std::size_t n = q.dim(0);
  const std::size_t lq = q.dim(1);
  const std::size_t d = q.dim(2);
  const std::size_t lk = k.dim(1);
  if (k.dim(2) != d) throw DimensionError("attention: query/key depth mismatch " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  if (k.dim(0) != n || v.dim(0) != n || v.dim(1) != lk || v.dim(2) != d) {
    throw DimensionError("attention: key/value shapes " + shape_str(k.shape()) + ", " + shape_str(v.shape()) +
                         " incompatible with query " + shape_str(q.shape()));
  }
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  auto probs = std::make_shared<Tensor<T>>(Shape{n, lq, lk});
  Tensor<T> out(Shape{n, lq, d});
  for (std::size_t b = 0; b < n; ++b) {
    T* p = probs->ptr() + b * lq * lk;
    kernels::gemm_acc_bt<T>(lq, lk, d, q.value().ptr() + b * lq * d, d, k.value().ptr() + b * lk * d, d, p, lk);
    for (std::size_t i = 0; i < lq; ++i) {
      T* row = p + i * lk;
      T mx = row[0] * inv_sqrt_d;
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] *= inv_sqrt_d;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      const T inv_z = static_cast<T>(1.0 / z);
      for (std::size_t j = 0; j < lk; ++j) row[j] *= inv_z;
    }
    kernels::gemm_acc<T>(lq, d, lk, p, lk, 1, v.value().ptr() + b * lk * d, d, out.ptr() + b * lq * d, d);
  }

  Node<T>* nq = q.node();
  Node<T>* nk = k.node();
  Node<T>* nv = v.node();
  return make_result<T>(std::move(out), {q, k, v}, "attention",
                        [nq, nk, nv, probs, n, lq, lk, d, inv_sqrt_d](const Tensor<T>& g) {
                          std::vector<T> dp(lq * lk);
                          for (std::size_t b = 0; b < n; ++b) {
                            const T* p = probs->ptr() + b * lq * lk;
                            const T* go = g.ptr() + b * lq * d;
                            if (nv->requires_grad) {
                              kernels::gemm_acc<T>(lk, d, lq, p, 1, lk, go, d, nv->grad_buffer().ptr() + b * lk * d, d);
                            }
                            if (!nq->requires_grad && !nk->requires_grad) continue;
                            std::fill(dp.begin(), dp.end(), T{0});
                            kernels::gemm_acc_bt<T>(lq, lk, d, go, d, nv->value.ptr() + b * lk * d, d, dp.data(), lk);
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled by 1/sqrt(D).
                            for (std::size_t i = 0; i < lq; ++i) {
                              double dot = 0.0;
                              for (std::size_t j = 0; j < lk; ++j) dot += static_cast<double>(dp[i * lk + j]) * p[i * lk + j];
                              for (std::size_t j = 0; j < lk; ++j) {
                                dp[i * lk + j] = static_cast<T>(p[i * lk + j] * (dp[i * lk + j] - dot)) * inv_sqrt_d;
                              }
                            }
                            if (nq->requires_grad) {
                              kernels::gemm_acc<T>(lq, d, lk, dp.data(), lk, 1, nk->value.ptr() + b * lk * d, d,
                                                   nq->grad_buffer().ptr() + b * lq * d, d);
                            }
                            if (nk->requires_grad) {
                              kernels::gemm_acc<T>(lk, d, lq, dp.data(), 1, lk, nq->value.ptr() + b * lq * d, d,
                                                   nk->grad_buffer().ptr() + b * lk * d, d);
                            }
                          }
                        });
}

template Var<float> group_norm<float>(const Var<float>&, std::size_t, const Var<float>&, const Var<float>&, double);
template Var<double> group_norm<double>(const Var<double>&, std::size_t, const Var<double>&, const Var<double>&, double);
template Var<float> attention<float>(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> attention<double>(const Var<double>&, const Var<double>&, const Var<double>&);

}  // namespace seqlidar::ops
