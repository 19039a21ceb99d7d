// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "seqlidar/autograd.hpp"

namespace seqlidar::ops::detail {

template <typename T>
inline void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
inline void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Calls fn(grad_buffer) when the node takes part in the backward pass.
template <typename T, typename Fn>
inline void accumulate(Node<T>* node, Fn&& fn) {
  if (node != nullptr && node->requires_grad) fn(node->grad_buffer());
}

}  // namespace seqlidar::ops::detail
