// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "seqlidar/autograd.hpp"

// Differentiable operations over Var<T>. All reductions run in a fixed
// row-major order, so results are reproducible bit for bit.
namespace seqlidar::ops {

// ---- elementwise ---------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);

/// y = alpha * xs + (1 - alpha) * xt, alpha of shape [1].
template <typename T> Var<T> blend(const Var<T>& alpha, const Var<T>& xs, const Var<T>& xt);

// ---- reductions ----------------------------------------------------------
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// mean((a - b)^2) as a [1] tensor.
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b);

// ---- layout --------------------------------------------------------------
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& perm);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// [B, ...] -> [B*times, ...], each leading row repeated `times` times consecutively.
template <typename T> Var<T> repeat_rows(const Var<T>& a, std::size_t times);

// ---- layers --------------------------------------------------------------
/// x [N,in] · w [in,out] + b [out].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// x [M,D] + r broadcast over rows, r with D elements.
template <typename T> Var<T> add_row(const Var<T>& x, const Var<T>& r);
/// x [N,C,...] * (1 + scale[N,C]) + shift[N,C].
template <typename T> Var<T> channel_modulate(const Var<T>& x, const Var<T>& scale, const Var<T>& shift);

/// 2D convolution with zero padding along H and circular padding along W.
/// x [B,C,H,W], w [O,C,kh,kw] (odd extents), b [O]; stride 1 or 2 on both axes.
template <typename T>
Var<T> conv2d_circular(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride = 1);

/// Temporal convolution with a (3,1,1) kernel and one zero frame of padding on
/// each end. x [B,C,F,H,W], w [O,C,3,1,1], b [O] -> [B,O,F,H,W].
template <typename T> Var<T> conv3d_temporal(const Var<T>& x, const Var<T>& w, const Var<T>& b);
/// Same operator on the frames-before-channels layout [B,F,C,H,W] -> [B,F,O,H,W].
template <typename T> Var<T> conv3d_temporal_bf(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);

/// Group normalization of x [N,C,...] with per-channel affine gamma/beta [C].
template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5);

/// softmax(q kᵀ / sqrt(D)) v over [N,L,D] x [N,L',D] x [N,L',D].
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

/// Rows of table [V,D] selected by ids -> [L,D].
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

}  // namespace seqlidar::ops
