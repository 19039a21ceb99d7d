// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace seqlidar::kernels {

// C[m*ldc + n] += sum_k A(m,k) * B[k*ldb + n], with A(m,k) = a[m*a_rs + k*a_cs].
//
// Every output element is accumulated as a left-to-right chain over k starting
// from its current value, with the same fused or unfused multiply-add in every
// lane and in the scalar tail. Results therefore never depend on an element's
// column position, which makes column-permutation equivariance bit-exact.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t a_rs, std::size_t a_cs,
              const T* b, std::size_t ldb, T* c, std::size_t ldc);

// C[m*ldc + n] += sum_k A[m*lda + k] * B[n*ldb + k]  (A·Bᵀ). B is transposed into
// scratch first, so the accumulation contract is the same as gemm_acc.
template <typename T>
void gemm_acc_bt(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda, const T* b,
                 std::size_t ldb, T* c, std::size_t ldc);

// C[m*ldc + n] += sum_k A[m*lda + k] * B[n*ldb + k] for long contiguous K
// (weight gradients). Lanes accumulate strided partial sums that are reduced
// in a fixed order: deterministic, but not the gemm_acc chain.
template <typename T>
void gemm_dot_acc(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t lda, const T* b,
                  std::size_t ldb, T* c, std::size_t ldc);

}  // namespace seqlidar::kernels
