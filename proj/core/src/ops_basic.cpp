// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstring>

#include "ops_internal.hpp"
#include "seqlidar/gemm.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar::ops {

using detail::accumulate;
using detail::require_rank;
using detail::require_same_shape;

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] + pb[i];
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return make_result<T>(std::move(out), {a, b}, "add", [na, nb](const Tensor<T>& g) {
    for (Node<T>* n : {na, nb}) {
      accumulate(n, [&](Tensor<T>& gb) {
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      });
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return make_result<T>(std::move(out), {a, b}, "sub", [na, nb](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    });
    accumulate(nb, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return make_result<T>(std::move(out), {a, b}, "mul", [na, nb](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * nb->value[i];
    });
    accumulate(nb, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * na->value[i];
    });
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = a.value()[i] * factor;
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "scale", [na, factor](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * factor;
    });
  });
}

namespace {
template <typename T>
inline T sigmoid_scalar(T x) {
  return T{1} / (T{1} + std::exp(-x));
}
}  // namespace

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = sigmoid_scalar(a.value()[i]);
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "sigmoid", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const T s = sigmoid_scalar(na->value[i]);
        gb[i] += g[i] * s * (T{1} - s);
      }
    });
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.value().ptr();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = x[i] * sigmoid_scalar(x[i]);
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "silu", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      const T* xv = na->value.ptr();
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const T s = sigmoid_scalar(xv[i]);
        gb[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
      }
    });
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = std::max(a.value()[i], T{0});
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "relu", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += na->value[i] > T{0} ? g[i] : T{0};
    });
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = a.value()[i] * a.value()[i];
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "square", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += T{2} * na->value[i] * g[i];
    });
  });
}

template <typename T>
Var<T> blend(const Var<T>& alpha, const Var<T>& xs, const Var<T>& xt) {
  if (alpha.numel() != 1) throw DimensionError("blend: alpha must hold one element");
  require_same_shape(xs, xt, "blend");
  const T w = alpha.value()[0];
  const T wc = T{1} - w;
  Tensor<T> out(xs.shape());
  const T* s = xs.value().ptr();
  const T* t = xt.value().ptr();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = w * s[i] + wc * t[i];
  Node<T>* na = alpha.node();
  Node<T>* ns = xs.node();
  Node<T>* nt = xt.node();
  return make_result<T>(std::move(out), {alpha, xs, xt}, "blend", [na, ns, nt, w, wc](const Tensor<T>& g) {
    accumulate(ns, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += w * g[i];
    });
    accumulate(nt, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += wc * g[i];
    });
    accumulate(na, [&](Tensor<T>& gb) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += static_cast<double>(g[i]) * (ns->value[i] - nt->value[i]);
      gb[0] += static_cast<T>(acc);
    });
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  Node<T>* na = a.node();
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc)), {a}, "sum", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (auto& v : gb.data()) v += g[0];
    });
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.numel())));
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mse");
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
    acc += d * d;
  }
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  const T inv = static_cast<T>(2.0 / static_cast<double>(n));
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {a, b}, "mse",
                        [na, nb, inv](const Tensor<T>& g) {
                          const T gs = g[0] * inv;
                          accumulate(na, [&](Tensor<T>& gb) {
                            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += gs * (na->value[i] - nb->value[i]);
                          });
                          accumulate(nb, [&](Tensor<T>& gb) {
                            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= gs * (na->value[i] - nb->value[i]);
                          });
                        });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "reshape", [na](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    });
  });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each output flat index, the flat index of the source element.
std::vector<std::size_t> permute_map(const Shape& in_shape, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = in_shape.size();
  out_shape.resize(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_st = strides_of(in_shape);
  std::vector<std::size_t> src_st(r);
  for (std::size_t i = 0; i < r; ++i) src_st[i] = in_st[perm[i]];
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += src_st[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_st[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in_shape = a.shape();
  if (perm.size() != in_shape.size()) throw DimensionError("permute: rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(permute_map(in_shape, perm, out_shape));
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < out.numel(); ++o) out[o] = a.value()[(*map)[o]];
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "permute", [na, map](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t o = 0; o < g.numel(); ++o) gb[(*map)[o]] += g[o];
    });
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;

  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::vector<Node<T>*> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.ptr() + o * out_row + off, p.value().ptr() + o * row, row * sizeof(T));
    }
    offsets.push_back(off);
    nodes.push_back(p.node());
    off += row;
  }
  return make_result<T>(std::move(out), parts, "concat", [nodes, offsets, outer, out_row, inner, axis](const Tensor<T>& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      accumulate(nodes[i], [&](Tensor<T>& gb) {
        const std::size_t row = nodes[i]->value.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.ptr() + o * out_row + offsets[i];
          T* dst = gb.ptr() + o * row;
          for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
        }
      });
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) throw DimensionError("slice: bad range on " + shape_str(s));
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.ptr() + o * out_row, a.value().ptr() + o * in_row + off, out_row * sizeof(T));
  }
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "slice", [na, outer, in_row, out_row, off](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_row; ++j) gb[o * in_row + off + j] += g[o * out_row + j];
      }
    });
  });
}

template <typename T>
Var<T> repeat_rows(const Var<T>& a, std::size_t times) {
  if (times == 0) throw DimensionError("repeat_rows: times must be positive");
  Shape out_shape = a.shape();
  const std::size_t rows = out_shape.at(0);
  const std::size_t row = a.numel() / rows;
  out_shape[0] *= times;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      std::memcpy(out.ptr() + (r * times + k) * row, a.value().ptr() + r * row, row * sizeof(T));
    }
  }
  Node<T>* na = a.node();
  return make_result<T>(std::move(out), {a}, "repeat_rows", [na, rows, row, times](const Tensor<T>& g) {
    accumulate(na, [&](Tensor<T>& gb) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < times; ++k) {
          const T* src = g.ptr() + (r * times + k) * row;
          for (std::size_t j = 0; j < row; ++j) gb[r * row + j] += src[j];
        }
      }
    });
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.dim(0);
  const std::size_t in = x.dim(1);
  const std::size_t out_f = w.dim(1);
  if (w.dim(0) != in) throw DimensionError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  if (b.defined() && b.numel() != out_f) throw DimensionError("linear: bias size mismatch");
  Tensor<T> out(Shape{n, out_f});
  if (b.defined()) {
    for (std::size_t r = 0; r < n; ++r) std::memcpy(out.ptr() + r * out_f, b.value().ptr(), out_f * sizeof(T));
  }
  kernels::gemm_acc<T>(n, out_f, in, x.value().ptr(), in, 1, w.value().ptr(), out_f, out.ptr(), out_f);
  Node<T>* nx = x.node();
  Node<T>* nw = w.node();
  Node<T>* nb = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(out), inputs, "linear", [nx, nw, nb, n, in, out_f](const Tensor<T>& g) {
    accumulate(nx, [&](Tensor<T>& gb) {
      kernels::gemm_acc_bt<T>(n, in, out_f, g.ptr(), out_f, nw->value.ptr(), out_f, gb.ptr(), in);
    });
    accumulate(nw, [&](Tensor<T>& gb) {
      kernels::gemm_acc<T>(in, out_f, n, nx->value.ptr(), 1, in, g.ptr(), out_f, gb.ptr(), out_f);
    });
    accumulate(nb, [&](Tensor<T>& gb) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
      }
    });
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& r) {
  require_rank(x, 2, "add_row");
  const std::size_t m = x.dim(0);
  const std::size_t d = x.dim(1);
  if (r.numel() != d) throw DimensionError("add_row: row has " + std::to_string(r.numel()) + " elements, expected " + std::to_string(d));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] + r.value()[j];
  }
  Node<T>* nx = x.node();
  Node<T>* nr = r.node();
  return make_result<T>(std::move(out), {x, r}, "add_row", [nx, nr, m, d](const Tensor<T>& g) {
    accumulate(nx, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
    });
    accumulate(nr, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
    });
  });
}

template <typename T>
Var<T> channel_modulate(const Var<T>& x, const Var<T>& scale_v, const Var<T>& shift) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("channel_modulate: input rank < 2");
  const std::size_t n = s[0];
  const std::size_t c = s[1];
  const std::size_t inner = x.numel() / (n * c);
  if (scale_v.shape() != Shape{n, c} || shift.shape() != Shape{n, c}) {
    throw DimensionError("channel_modulate: scale/shift must be " + shape_str(Shape{n, c}));
  }
  Tensor<T> out(s);
  const T* xv = x.value().ptr();
  for (std::size_t i = 0; i < n * c; ++i) {
    const T a = T{1} + scale_v.value()[i];
    const T b = shift.value()[i];
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = xv[i * inner + j] * a + b;
  }
  Node<T>* nx = x.node();
  Node<T>* ns = scale_v.node();
  Node<T>* nh = shift.node();
  return make_result<T>(std::move(out), {x, scale_v, shift}, "channel_modulate",
                        [nx, ns, nh, n, c, inner](const Tensor<T>& g) {
                          accumulate(nx, [&](Tensor<T>& gb) {
                            for (std::size_t i = 0; i < n * c; ++i) {
                              const T a = T{1} + ns->value[i];
                              for (std::size_t j = 0; j < inner; ++j) gb[i * inner + j] += g[i * inner + j] * a;
                            }
                          });
                          accumulate(ns, [&](Tensor<T>& gb) {
                            for (std::size_t i = 0; i < n * c; ++i) {
                              double acc = 0.0;
                              for (std::size_t j = 0; j < inner; ++j) {
                                acc += static_cast<double>(g[i * inner + j]) * nx->value[i * inner + j];
                              }
                              gb[i] += static_cast<T>(acc);
                            }
                          });
                          accumulate(nh, [&](Tensor<T>& gb) {
                            for (std::size_t i = 0; i < n * c; ++i) {
                              double acc = 0.0;
                              for (std::size_t j = 0; j < inner; ++j) acc += g[i * inner + j];
                              gb[i] += static_cast<T>(acc);
                            }
                          });
                        });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const std::size_t nc = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = x.value().ptr() + p * h * w;
    T* dst = out.ptr() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
  }
  Node<T>* nx = x.node();
  return make_result<T>(std::move(out), {x}, "upsample_nearest2x", [nx, nc, h, w](const Tensor<T>& g) {
    accumulate(nx, [&](Tensor<T>& gb) {
      for (std::size_t p = 0; p < nc; ++p) {
        const T* src = g.ptr() + p * 4 * h * w;
        T* dst = gb.ptr() + p * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
          for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
        }
      }
    });
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw VocabularyError("embedding: token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < idv.size(); ++i) {
    std::memcpy(out.ptr() + i * d, table.value().ptr() + static_cast<std::size_t>(idv[i]) * d, d * sizeof(T));
  }
  Node<T>* nt = table.node();
  return make_result<T>(std::move(out), {table}, "embedding", [nt, idv, d](const Tensor<T>& g) {
    accumulate(nt, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < idv.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) gb[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
      }
    });
  });
}

#define SEQLIDAR_INSTANTIATE_BASIC(T)                                                                   \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> scale<T>(const Var<T>&, T);                                                          \
  template Var<T> sigmoid<T>(const Var<T>&);                                                           \
  template Var<T> silu<T>(const Var<T>&);                                                              \
  template Var<T> relu<T>(const Var<T>&);                                                              \
  template Var<T> square<T>(const Var<T>&);                                                            \
  template Var<T> blend<T>(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> sum<T>(const Var<T>&);                                                               \
  template Var<T> mean<T>(const Var<T>&);                                                              \
  template Var<T> mse<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                    \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                          \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);                                  \
  template Var<T> slice<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);                      \
  template Var<T> repeat_rows<T>(const Var<T>&, std::size_t);                                          \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                              \
  template Var<T> add_row<T>(const Var<T>&, const Var<T>&);                                            \
  template Var<T> channel_modulate<T>(const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template Var<T> upsample_nearest2x<T>(const Var<T>&);                                                \
  template Var<T> embedding<T>(const Var<T>&, std::span<const std::int32_t>);

SEQLIDAR_INSTANTIATE_BASIC(float)
SEQLIDAR_INSTANTIATE_BASIC(double)

}  // namespace seqlidar::ops
