// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/gemm.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(__AVX512F__) || (defined(__AVX2__) && defined(__FMA__))
#include <immintrin.h>
#endif

namespace seqlidar::kernels {

namespace {

template <typename T>
inline T madd(T a, T b, T c) {
#if defined(__FMA__)
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

template <typename T>
struct Simd {
  static constexpr std::size_t kWidth = 0;
};

#if defined(__AVX512F__)
template <>
struct Simd<float> {
  using Reg = __m512;
  static constexpr std::size_t kWidth = 16;
  static Reg load(const float* p) { return _mm512_loadu_ps(p); }
  static void store(float* p, Reg v) { _mm512_storeu_ps(p, v); }
  static Reg splat(float v) { return _mm512_set1_ps(v); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm512_fmadd_ps(a, b, c); }
  static Reg zero() { return _mm512_setzero_ps(); }
  static float reduce(Reg v) {
    alignas(64) float lanes[16];
    _mm512_store_ps(lanes, v);
    float s = 0;
    for (float x : lanes) s += x;
    return s;
  }
};
template <>
struct Simd<double> {
  using Reg = __m512d;
  static constexpr std::size_t kWidth = 8;
  static Reg load(const double* p) { return _mm512_loadu_pd(p); }
  static void store(double* p, Reg v) { _mm512_storeu_pd(p, v); }
  static Reg splat(double v) { return _mm512_set1_pd(v); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm512_fmadd_pd(a, b, c); }
  static Reg zero() { return _mm512_setzero_pd(); }
  static double reduce(Reg v) {
    alignas(64) double lanes[8];
    _mm512_store_pd(lanes, v);
    double s = 0;
    for (double x : lanes) s += x;
    return s;
  }
};
#elif defined(__AVX2__) && defined(__FMA__)
template <>
struct Simd<float> {
  using Reg = __m256;
  static constexpr std::size_t kWidth = 8;
  static Reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, Reg v) { _mm256_storeu_ps(p, v); }
  static Reg splat(float v) { return _mm256_set1_ps(v); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_ps(a, b, c); }
  static Reg zero() { return _mm256_setzero_ps(); }
  static float reduce(Reg v) {
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, v);
    float s = 0;
    for (float x : lanes) s += x;
    return s;
  }
};
template <>
struct Simd<double> {
  using Reg = __m256d;
  static constexpr std::size_t kWidth = 4;
  static Reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, Reg v) { _mm256_storeu_pd(p, v); }
  static Reg splat(double v) { return _mm256_set1_pd(v); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_pd(a, b, c); }
  static Reg zero() { return _mm256_setzero_pd(); }
  static double reduce(Reg v) {
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, v);
    double s = 0;
    for (double x : lanes) s += x;
    return s;
  }
};
#endif

constexpr std::size_t kBlockK = 256;
constexpr std::size_t kBlockN = 512;
constexpr std::size_t kRows = 8;

// Scalar reference path, also used for column tails.
template <typename T>
void scalar_block(std::size_t m0, std::size_t m1, std::size_t n0, std::size_t n1, std::size_t k0, std::size_t k1,
                  const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, std::size_t ldb, T* c,
                  std::size_t ldc) {
  for (std::size_t m = m0; m < m1; ++m) {
    T* crow = c + m * ldc;
    for (std::size_t n = n0; n < n1; ++n) {
      T acc = crow[n];
      for (std::size_t k = k0; k < k1; ++k) acc = madd(a[m * a_rs + k * a_cs], b[k * ldb + n], acc);
      crow[n] = acc;
    }
  }
}

// b_panel holds B[k0:k1, n0:n_vec_end] as consecutive [k][NR] strips, one strip
// per NR-wide column tile, so the micro-kernel streams contiguous memory.
template <typename T>
void block(std::size_t m0, std::size_t m1, std::size_t n0, std::size_t n1, std::size_t k0, std::size_t k1,
           const T* a, std::size_t a_rs, std::size_t a_cs, const T* b, std::size_t ldb, T* c, std::size_t ldc,
           std::vector<T>& panel) {
  using S = Simd<T>;
  if constexpr (S::kWidth == 0) {
    scalar_block(m0, m1, n0, n1, k0, k1, a, a_rs, a_cs, b, ldb, c, ldc);
  } else {
    constexpr std::size_t W = S::kWidth;
    constexpr std::size_t NR = 2 * W;
    const std::size_t n_vec_end = n0 + (n1 - n0) / NR * NR;
    const std::size_t kc = k1 - k0;
    const std::size_t tiles = (n_vec_end - n0) / NR;
    panel.resize(tiles * kc * NR);
    for (std::size_t k = 0; k < kc; ++k) {
      const T* brow = b + (k0 + k) * ldb + n0;
      for (std::size_t t = 0; t < tiles; ++t) std::copy(brow + t * NR, brow + (t + 1) * NR, panel.data() + (t * kc + k) * NR);
    }
    for (std::size_t t = 0; t < tiles; ++t) {
      const std::size_t n = n0 + t * NR;
      const T* strip = panel.data() + t * kc * NR;
      std::size_t m = m0;
      for (; m + kRows <= m1; m += kRows) {
        typename S::Reg acc[kRows][2];
        for (std::size_t r = 0; r < kRows; ++r) {
          acc[r][0] = S::load(c + (m + r) * ldc + n);
          acc[r][1] = S::load(c + (m + r) * ldc + n + W);
        }
        const T* ap = a + m * a_rs + k0 * a_cs;
        for (std::size_t k = 0; k < kc; ++k) {
          const auto b0 = S::load(strip + k * NR);
          const auto b1 = S::load(strip + k * NR + W);
          for (std::size_t r = 0; r < kRows; ++r) {
            const auto av = S::splat(ap[r * a_rs + k * a_cs]);
            acc[r][0] = S::fmadd(av, b0, acc[r][0]);
            acc[r][1] = S::fmadd(av, b1, acc[r][1]);
          }
        }
        for (std::size_t r = 0; r < kRows; ++r) {
          S::store(c + (m + r) * ldc + n, acc[r][0]);
          S::store(c + (m + r) * ldc + n + W, acc[r][1]);
        }
      }
      for (; m < m1; ++m) {
        auto acc0 = S::load(c + m * ldc + n);
        auto acc1 = S::load(c + m * ldc + n + W);
        for (std::size_t k = 0; k < kc; ++k) {
          const auto av = S::splat(a[m * a_rs + (k0 + k) * a_cs]);
          acc0 = S::fmadd(av, S::load(strip + k * NR), acc0);
          acc1 = S::fmadd(av, S::load(strip + k * NR + W), acc1);
        }
        S::store(c + m * ldc + n, acc0);
        S::store(c + m * ldc + n + W, acc1);
      }
    }
    if (n_vec_end < n1) scalar_block(m0, m1, n_vec_end, n1, k0, k1, a, a_rs, a_cs, b, ldb, c, ldc);
  }
}

}  // namespace

template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t a_rs, std::size_t a_cs,
              const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  if (M == 0 || N == 0 || K == 0) return;
  // K blocks are visited in increasing order for every element, so blocking
  // does not change the accumulation chain.
  thread_local std::vector<T> panel;
  for (std::size_t n0 = 0; n0 < N; n0 += kBlockN) {
    const std::size_t n1 = std::min(N, n0 + kBlockN);
    for (std::size_t k0 = 0; k0 < K; k0 += kBlockK) {
      const std::size_t k1 = std::min(K, k0 + kBlockK);
      block(0, M, n0, n1, k0, k1, a, a_rs, a_cs, b, ldb, c, ldc, panel);
    }
  }
}

template <typename T>
void gemm_acc_bt(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc) {
  std::vector<T> bt(K * N);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) bt[k * N + n] = b[n * ldb + k];
  }
  gemm_acc<T>(M, N, K, a, lda, 1, bt.data(), N, c, ldc);
}

template <typename T>
void gemm_dot_acc(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc) {
  using S = Simd<T>;
  if constexpr (S::kWidth == 0) {
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        T acc = T{0};
        for (std::size_t k = 0; k < K; ++k) acc = madd(a[m * lda + k], b[n * ldb + k], acc);
        c[m * ldc + n] += acc;
      }
  } else {
    constexpr std::size_t W = S::kWidth;
    constexpr std::size_t MR = 4, NR = 4;
    const std::size_t kv = K / W * W;
    // Lane partials for one (m, n) pair, then the scalar tail.
    auto finish = [&](std::size_t m, std::size_t n, typename S::Reg acc) {
      T s = S::reduce(acc);
      for (std::size_t k = kv; k < K; ++k) s = madd(a[m * lda + k], b[n * ldb + k], s);
      c[m * ldc + n] += s;
    };
    std::size_t m = 0;
    for (; m + MR <= M; m += MR) {
      std::size_t n = 0;
      for (; n + NR <= N; n += NR) {
        typename S::Reg acc[MR][NR];
        for (auto& row : acc)
          for (auto& r : row) r = S::zero();
        for (std::size_t k = 0; k < kv; k += W) {
          typename S::Reg bv[NR];
          for (std::size_t q = 0; q < NR; ++q) bv[q] = S::load(b + (n + q) * ldb + k);
          for (std::size_t r = 0; r < MR; ++r) {
            const auto av = S::load(a + (m + r) * lda + k);
            for (std::size_t q = 0; q < NR; ++q) acc[r][q] = S::fmadd(av, bv[q], acc[r][q]);
          }
        }
        for (std::size_t r = 0; r < MR; ++r)
          for (std::size_t q = 0; q < NR; ++q) finish(m + r, n + q, acc[r][q]);
      }
      for (; n < N; ++n) {
        for (std::size_t r = 0; r < MR; ++r) {
          auto acc = S::zero();
          for (std::size_t k = 0; k < kv; k += W) acc = S::fmadd(S::load(a + (m + r) * lda + k), S::load(b + n * ldb + k), acc);
          finish(m + r, n, acc);
        }
      }
    }
    for (; m < M; ++m) {
      for (std::size_t n = 0; n < N; ++n) {
        auto acc = S::zero();
        for (std::size_t k = 0; k < kv; k += W) acc = S::fmadd(S::load(a + m * lda + k), S::load(b + n * ldb + k), acc);
        finish(m, n, acc);
      }
    }
  }
}

template void gemm_dot_acc<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t, const float*,
                                  std::size_t, float*, std::size_t);
template void gemm_dot_acc<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t,
                                   const double*, std::size_t, double*, std::size_t);
template void gemm_acc<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t, std::size_t,
                              const float*, std::size_t, float*, std::size_t);
template void gemm_acc<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t, std::size_t,
                               const double*, std::size_t, double*, std::size_t);
template void gemm_acc_bt<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t, const float*,
                                 std::size_t, float*, std::size_t);
template void gemm_acc_bt<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t,
                                  const double*, std::size_t, double*, std::size_t);

}  // namespace seqlidar::kernels
