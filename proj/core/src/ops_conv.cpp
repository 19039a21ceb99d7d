// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstring>

#include "ops_internal.hpp"
#include "seqlidar/gemm.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar::ops {

using detail::accumulate;
using detail::require_rank;

namespace {

struct Conv2dGeom {
  std::size_t c, h, w, o, kh, kw, stride, ho, wo;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t out_plane() const { return ho * wo; }
};

// Column matrix [C*kh*kw, Ho*Wo]; rows outside H read zero, columns wrap.
template <typename T>
void im2col(const T* x, const Conv2dGeom& g, T* col) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(g.kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t di = 0; di < g.kh; ++di) {
      for (std::size_t dj = 0; dj < g.kw; ++dj) {
        T* row = col + ((c * g.kh + di) * g.kw + dj) * g.out_plane();
        for (std::size_t i = 0; i < g.ho; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + di) - ph;
          T* dst = row + i * g.wo;
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(r)) * g.w;
          std::ptrdiff_t col0 = (static_cast<std::ptrdiff_t>(dj) - pw) % W;
          if (col0 < 0) col0 += W;
          if (g.stride == 1) {
            const std::size_t first = g.w - static_cast<std::size_t>(col0);
            std::memcpy(dst, src + col0, first * sizeof(T));
            std::memcpy(dst + first, src, static_cast<std::size_t>(col0) * sizeof(T));
          } else {
            std::size_t cc = static_cast<std::size_t>(col0);
            for (std::size_t j = 0; j < g.wo; ++j) {
              dst[j] = src[cc];
              cc += g.stride;
              if (cc >= g.w) cc -= g.w;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const Conv2dGeom& g, T* dx) {
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(g.kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t di = 0; di < g.kh; ++di) {
      for (std::size_t dj = 0; dj < g.kw; ++dj) {
        const T* row = col + ((c * g.kh + di) * g.kw + dj) * g.out_plane();
        for (std::size_t i = 0; i < g.ho; ++i) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * g.stride + di) - ph;
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(r)) * g.w;
          const T* src = row + i * g.wo;
          std::ptrdiff_t col0 = (static_cast<std::ptrdiff_t>(dj) - pw) % W;
          if (col0 < 0) col0 += W;
          std::size_t cc = static_cast<std::size_t>(col0);
          for (std::size_t j = 0; j < g.wo; ++j) {
            dst[cc] += src[j];
            cc += g.stride;
            if (cc >= g.w) cc -= g.w;
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d_circular(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride) {
  require_rank(x, 4, "conv2d_circular");
  require_rank(w, 4, "conv2d_circular");
  if (stride != 1 && stride != 2) throw ConfigError("conv2d_circular: stride must be 1 or 2");
  Conv2dGeom g{};
  const std::size_t batch = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  if (w.dim(1) != g.c) {
    throw DimensionError("conv2d_circular: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  if (g.kw % 2 == 0 || g.kh % 2 == 0) throw ConfigError("conv2d_circular: kernel extents must be odd");
  if (b.defined() && b.numel() != g.o) throw DimensionError("conv2d_circular: bias size mismatch");
  if (g.w % stride != 0) throw DimensionError("conv2d_circular: width not divisible by stride");
  g.ho = (g.h + 2 * (g.kh / 2) - g.kh) / stride + 1;
  g.wo = g.w / stride;

  Tensor<T> out(Shape{batch, g.o, g.ho, g.wo});
  std::vector<T> col(g.ckk() * g.out_plane());
  const std::size_t plane = g.out_plane();
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(x.value().ptr() + n * g.c * g.h * g.w, g, col.data());
    T* dst = out.ptr() + n * g.o * plane;
    if (b.defined()) {
      for (std::size_t o = 0; o < g.o; ++o) std::fill(dst + o * plane, dst + (o + 1) * plane, b.value()[o]);
    }
    kernels::gemm_acc<T>(g.o, plane, g.ckk(), w.value().ptr(), g.ckk(), 1, col.data(), plane, dst, plane);
  }

  Node<T>* nx = x.node();
  Node<T>* nw = w.node();
  Node<T>* nb = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(out), inputs, "conv2d_circular", [nx, nw, nb, g, batch](const Tensor<T>& gout) {
    const std::size_t plane = g.out_plane();
    const std::size_t ckk = g.ckk();
    std::vector<T> col(ckk * plane);
    const bool need_w = nw->requires_grad;
    const bool need_x = nx->requires_grad;
    // Stride 1: dx is the same padded correlation of gout with the kernel
    // flipped in space and transposed in channels.
    const bool direct_x = need_x && g.stride == 1;
    Conv2dGeom gt = g;
    std::vector<T> wt;
    std::vector<T> colt;
    if (direct_x) {
      gt.c = g.o;
      gt.o = g.c;
      wt.resize(g.c * g.o * g.kh * g.kw);
      const T* w = nw->value.ptr();
      for (std::size_t o = 0; o < g.o; ++o)
        for (std::size_t c = 0; c < g.c; ++c)
          for (std::size_t di = 0; di < g.kh; ++di)
            for (std::size_t dj = 0; dj < g.kw; ++dj)
              wt[((c * g.o + o) * g.kh + (g.kh - 1 - di)) * g.kw + (g.kw - 1 - dj)] =
                  w[((o * g.c + c) * g.kh + di) * g.kw + dj];
      colt.resize(gt.ckk() * plane);
    }
    for (std::size_t n = 0; n < batch; ++n) {
      const T* go = gout.ptr() + n * g.o * plane;
      if (need_w) {
        im2col(nx->value.ptr() + n * g.c * g.h * g.w, g, col.data());
        kernels::gemm_dot_acc<T>(g.o, ckk, plane, go, plane, col.data(), plane, nw->grad_buffer().ptr(), ckk);
      }
      if (direct_x) {
        im2col(go, gt, colt.data());
        kernels::gemm_acc<T>(g.c, plane, gt.ckk(), wt.data(), gt.ckk(), 1, colt.data(), plane,
                             nx->grad_buffer().ptr() + n * g.c * g.h * g.w, plane);
      } else if (need_x) {
        std::fill(col.begin(), col.end(), T{0});
        kernels::gemm_acc<T>(ckk, plane, g.o, nw->value.ptr(), 1, ckk, go, plane, col.data(), plane);
        col2im_add(col.data(), g, nx->grad_buffer().ptr() + n * g.c * g.h * g.w);
      }
    }
    accumulate(nb, [&](Tensor<T>& gb) {
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t o = 0; o < g.o; ++o) {
          double acc = 0.0;
          const T* go = gout.ptr() + (n * g.o + o) * plane;
          for (std::size_t j = 0; j < plane; ++j) acc += go[j];
          gb[o] += static_cast<T>(acc);
        }
      }
    });
  });
}

namespace {

// Strided view of a [B, C, F, P] volume: element (b, c, f, p) lives at
// b*sb + c*sc + f*sf + p.
struct VolumeLayout {
  std::size_t batch, channels, frames, plane;
  std::size_t sb, sc, sf;
};

VolumeLayout bcf_layout(std::size_t b, std::size_t c, std::size_t f, std::size_t p) {
  return {b, c, f, p, c * f * p, f * p, p};
}
VolumeLayout bfc_layout(std::size_t b, std::size_t c, std::size_t f, std::size_t p) {
  return {b, c, f, p, f * c * p, p, c * p};
}

template <typename T>
void temporal_forward(const T* x, const VolumeLayout& in, const T* w, const T* bias, std::size_t out_ch,
                      const VolumeLayout& out, T* y) {
  const std::size_t c = in.channels;
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t f = 0; f < in.frames; ++f) {
      T* dst = y + b * out.sb + f * out.sf;
      for (std::size_t o = 0; o < out_ch; ++o) {
        std::fill(dst + o * out.sc, dst + o * out.sc + in.plane, bias ? bias[o] : T{0});
      }
      for (std::size_t dt = 0; dt < 3; ++dt) {
        const std::ptrdiff_t src_f = static_cast<std::ptrdiff_t>(f + dt) - 1;
        if (src_f < 0 || src_f >= static_cast<std::ptrdiff_t>(in.frames)) continue;
        const T* src = x + b * in.sb + static_cast<std::size_t>(src_f) * in.sf;
        kernels::gemm_acc<T>(out_ch, in.plane, c, w + dt, 3 * c, 3, src, in.sc, dst, out.sc);
      }
    }
  }
}

template <typename T>
void temporal_backward(const T* gy, const VolumeLayout& out, std::size_t out_ch, Node<T>* nx, const VolumeLayout& in,
                       Node<T>* nw, Node<T>* nb) {
  const std::size_t c = in.channels;
  const T* x = nx->value.ptr();
  const T* w = nw->value.ptr();
  std::vector<T> dw_tap(out_ch * c);
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t f = 0; f < in.frames; ++f) {
      const T* g = gy + b * out.sb + f * out.sf;
      for (std::size_t dt = 0; dt < 3; ++dt) {
        const std::ptrdiff_t src_f = static_cast<std::ptrdiff_t>(f + dt) - 1;
        if (src_f < 0 || src_f >= static_cast<std::ptrdiff_t>(in.frames)) continue;
        const std::size_t off = b * in.sb + static_cast<std::size_t>(src_f) * in.sf;
        if (nw->requires_grad) {
          std::fill(dw_tap.begin(), dw_tap.end(), T{0});
          kernels::gemm_dot_acc<T>(out_ch, c, in.plane, g, out.sc, x + off, in.sc, dw_tap.data(), c);
          T* dw = nw->grad_buffer().ptr();
          for (std::size_t o = 0; o < out_ch; ++o) {
            for (std::size_t ci = 0; ci < c; ++ci) dw[(o * c + ci) * 3 + dt] += dw_tap[o * c + ci];
          }
        }
        if (nx->requires_grad) {
          kernels::gemm_acc<T>(c, in.plane, out_ch, w + dt, 3, 3 * c, g, out.sc, nx->grad_buffer().ptr() + off,
                               in.sc);
        }
      }
    }
  }
  accumulate(nb, [&](Tensor<T>& gb) {
    for (std::size_t b = 0; b < in.batch; ++b) {
      for (std::size_t f = 0; f < in.frames; ++f) {
        for (std::size_t o = 0; o < out_ch; ++o) {
          const T* g = gy + b * out.sb + f * out.sf + o * out.sc;
          double acc = 0.0;
          for (std::size_t p = 0; p < in.plane; ++p) acc += g[p];
          gb[o] += static_cast<T>(acc);
        }
      }
    }
  });
}

template <typename T>
void check_temporal_kernel(const Var<T>& w, std::size_t in_ch) {
  require_rank(w, 5, "conv3d_temporal");
  if (w.dim(2) != 3 || w.dim(3) != 1 || w.dim(4) != 1) {
    throw ConfigError("conv3d_temporal: kernel extents must be (3,1,1), got " + shape_str(w.shape()));
  }
  if (w.dim(1) != in_ch) throw DimensionError("conv3d_temporal: weight channels do not match input");
}

template <typename T>
Var<T> temporal_impl(const Var<T>& x, const Var<T>& w, const Var<T>& b, bool frames_first) {
  require_rank(x, 5, "conv3d_temporal");
  const std::size_t batch = x.dim(0);
  const std::size_t c = frames_first ? x.dim(2) : x.dim(1);
  const std::size_t f = frames_first ? x.dim(1) : x.dim(2);
  const std::size_t plane = x.dim(3) * x.dim(4);
  check_temporal_kernel(w, c);
  const std::size_t o = w.dim(0);
  if (b.defined() && b.numel() != o) throw DimensionError("conv3d_temporal: bias size mismatch");
  const VolumeLayout in = frames_first ? bfc_layout(batch, c, f, plane) : bcf_layout(batch, c, f, plane);
  const VolumeLayout out = frames_first ? bfc_layout(batch, o, f, plane) : bcf_layout(batch, o, f, plane);
  Shape out_shape = frames_first ? Shape{batch, f, o, x.dim(3), x.dim(4)} : Shape{batch, o, f, x.dim(3), x.dim(4)};
  Tensor<T> y(out_shape);
  temporal_forward(x.value().ptr(), in, w.value().ptr(), b.defined() ? b.value().ptr() : nullptr, o, out, y.ptr());
  Node<T>* nx = x.node();
  Node<T>* nw = w.node();
  Node<T>* nb = b.defined() ? b.node() : nullptr;
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(y), inputs, "conv3d_temporal", [nx, nw, nb, in, out, o](const Tensor<T>& g) {
    temporal_backward(g.ptr(), out, o, nx, in, nw, nb);
  });
}

}  // namespace

template <typename T>
Var<T> conv3d_temporal(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return temporal_impl(x, w, b, false);
}

template <typename T>
Var<T> conv3d_temporal_bf(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return temporal_impl(x, w, b, true);
}

template Var<float> conv2d_circular<float>(const Var<float>&, const Var<float>&, const Var<float>&, std::size_t);
template Var<double> conv2d_circular<double>(const Var<double>&, const Var<double>&, const Var<double>&, std::size_t);
template Var<float> conv3d_temporal<float>(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> conv3d_temporal<double>(const Var<double>&, const Var<double>&, const Var<double>&);
template Var<float> conv3d_temporal_bf<float>(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> conv3d_temporal_bf<double>(const Var<double>&, const Var<double>&, const Var<double>&);

}  // namespace seqlidar::ops
