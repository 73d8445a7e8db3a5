#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <type_traits>
#include <vector>

#include "voldeform/tensor.hpp"

// Dense NCDHW kernels: 3d convolution and its transpose, per-voxel linear
// map, channel layer norm, gelu, softmax, argmax. Every kernel that reduces
// accumulates per output element in one fixed loop order, and OpenMP loops
// are split so each output element is written by exactly one thread. Results
// are therefore bit-identical for any thread count.

namespace voldeform {

inline int64_t idiv_floor(int64_t a, int64_t b) {
  // b > 0
  return (a >= 0) ? a / b : -((-a + b - 1) / b);
}

inline int64_t idiv_ceil(int64_t a, int64_t b) {
  return idiv_floor(a + b - 1, b);
}

struct Conv3dSpec {
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t groups = 1;
};

template <class T>
struct LinearWeights {
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out); empty tensor means no bias
};

namespace detail {

inline void check_rank5(const std::vector<int64_t>& shape, const char* what) {
  if (shape.size() != 5) {
    throw ShapeError(std::string(what) + ": expected rank-5 NCDHW input, got " +
                     shape_string(shape));
  }
}

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride,
                               int64_t pad, const char* what) {
  const int64_t out = idiv_floor(in + 2 * pad - k, stride) + 1;
  if (out <= 0) {
    throw ShapeError(std::string(what) + ": empty output, input extent " +
                     std::to_string(in) + " kernel " + std::to_string(k) +
                     " stride " + std::to_string(stride) + " padding " +
                     std::to_string(pad));
  }
  return out;
}

inline void check_conv_args(const std::vector<int64_t>& xs,
                            const std::vector<int64_t>& ws,
                            const Conv3dSpec& spec) {
  check_rank5(xs, "conv3d");
  if (ws.size() != 5) {
    throw ShapeError("conv3d: weight must be (Cout, Cin/groups, kd, kh, kw), got " +
                     shape_string(ws));
  }
  if (spec.stride < 1 || spec.padding < 0 || spec.groups < 1) {
    throw ShapeError("conv3d: bad stride/padding/groups");
  }
  const int64_t cin = xs[1], cout = ws[0];
  if (cin % spec.groups != 0 || cout % spec.groups != 0) {
    throw ShapeError("conv3d: channels not divisible by groups");
  }
  if (ws[1] != cin / spec.groups) {
    throw ShapeError("conv3d: weight input-channel extent " +
                     std::to_string(ws[1]) + " does not match Cin/groups = " +
                     std::to_string(cin / spec.groups));
  }
  for (int a = 2; a < 5; ++a) {
    const int64_t k = ws[a];
    if (!(k % 2 == 1 || k == spec.stride)) {
      throw ShapeError("conv3d: kernel extent " + std::to_string(k) +
                       " must be odd or equal to the stride");
    }
  }
}

}  // namespace detail

// y[n,co,o] = sum_{ci in group, k} w[co,ci',k] * x[n,ci,o*s-p+k] + b[co]
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<std::type_identity_t<T>>* bias,
                 const Conv3dSpec& spec) {
  detail::check_conv_args(x.shape(), w.shape(), spec);
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t Cout = w.extent(0), Cg = w.extent(1), Kd = w.extent(2),
                Kh = w.extent(3), Kw = w.extent(4);
  const int64_t s = spec.stride, p = spec.padding;
  const int64_t Do = detail::conv_out_extent(D, Kd, s, p, "conv3d");
  const int64_t Ho = detail::conv_out_extent(H, Kh, s, p, "conv3d");
  const int64_t Wo = detail::conv_out_extent(W, Kw, s, p, "conv3d");
  if (bias && (bias->rank() != 1 || bias->extent(0) != Cout)) {
    throw ShapeError("conv3d: bias must have shape (Cout)");
  }
  const int64_t cout_per_group = Cout / spec.groups;

  Tensor<T> y({N, Cout, Do, Ho, Wo});
  const T* xd = x.data();
  const T* wd = w.data();
  T* yd = y.data();

#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      for (int64_t od = 0; od < Do; ++od) {
        const int64_t g = co / cout_per_group;
        const T* xn = xd + n * Cin * D * H * W;
        T* yplane = yd + (((n * Cout + co) * Do + od) * Ho) * Wo;
        for (int64_t ci = 0; ci < Cg; ++ci) {
          const T* xc = xn + (g * Cg + ci) * D * H * W;
          const T* wc = wd + ((co * Cg + ci) * Kd) * Kh * Kw;
          for (int64_t kd = 0; kd < Kd; ++kd) {
            const int64_t id = od * s - p + kd;
            if (id < 0 || id >= D) continue;
            for (int64_t kh = 0; kh < Kh; ++kh) {
              for (int64_t oh = 0; oh < Ho; ++oh) {
                const int64_t ih = oh * s - p + kh;
                if (ih < 0 || ih >= H) continue;
                const T* xrow = xc + (id * H + ih) * W;
                T* yrow = yplane + oh * Wo;
                for (int64_t kw = 0; kw < Kw; ++kw) {
                  const int64_t base = kw - p;
                  const int64_t lo = std::max<int64_t>(0, idiv_ceil(-base, s));
                  const int64_t hi =
                      std::min<int64_t>(Wo - 1, idiv_floor(W - 1 - base, s));
                  const T wv = wc[(kd * Kh + kh) * Kw + kw];
                  if (s == 1) {
                    const T* xo = xrow + base;
                    for (int64_t ow = lo; ow <= hi; ++ow) yrow[ow] += wv * xo[ow];
                  } else {
                    for (int64_t ow = lo; ow <= hi; ++ow) {
                      yrow[ow] += wv * xrow[ow * s + base];
                    }
                  }
                }
              }
            }
          }
        }
        if (bias) {
          const T b = (*bias)[co];
          for (int64_t i = 0; i < Ho * Wo; ++i) yplane[i] += b;
        }
      }
    }
  }
  return y;
}

// gather form of the input gradient; also serves as the adjoint of conv3d
template <class T>
Tensor<T> conv3d_backward_input(const Tensor<T>& gy, const Tensor<T>& w,
                                const Conv3dSpec& spec,
                                const std::vector<int64_t>& input_shape) {
  detail::check_conv_args(input_shape, w.shape(), spec);
  const int64_t N = input_shape[0], Cin = input_shape[1], D = input_shape[2],
                H = input_shape[3], W = input_shape[4];
  const int64_t Cout = w.extent(0), Cg = w.extent(1), Kd = w.extent(2),
                Kh = w.extent(3), Kw = w.extent(4);
  const int64_t s = spec.stride, p = spec.padding;
  const int64_t Do = gy.extent(2), Ho = gy.extent(3), Wo = gy.extent(4);
  if (gy.extent(0) != N || gy.extent(1) != Cout) {
    throw ShapeError("conv3d_backward_input: grad shape mismatch");
  }
  const int64_t cout_per_group = Cout / spec.groups;

  Tensor<T> gx({N, Cin, D, H, W});
  const T* gyd = gy.data();
  const T* wd = w.data();
  T* gxd = gx.data();

#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
      for (int64_t id = 0; id < D; ++id) {
        const int64_t g = ci / Cg;
        const int64_t ci_rel = ci % Cg;
        T* gxplane = gxd + (((n * Cin + ci) * D + id) * H) * W;
        for (int64_t cg = 0; cg < cout_per_group; ++cg) {
          const int64_t co = g * cout_per_group + cg;
          const T* gyc = gyd + ((n * Cout + co) * Do) * Ho * Wo;
          const T* wc = wd + ((co * Cg + ci_rel) * Kd) * Kh * Kw;
          for (int64_t kd = 0; kd < Kd; ++kd) {
            const int64_t num_d = id + p - kd;
            if (num_d % s != 0) continue;
            const int64_t od = num_d / s;
            if (od < 0 || od >= Do) continue;
            for (int64_t kh = 0; kh < Kh; ++kh) {
              for (int64_t ih = 0; ih < H; ++ih) {
                const int64_t num_h = ih + p - kh;
                if (num_h % s != 0) continue;
                const int64_t oh = num_h / s;
                if (oh < 0 || oh >= Ho) continue;
                const T* gyrow = gyc + (od * Ho + oh) * Wo;
                T* gxrow = gxplane + ih * W;
                for (int64_t kw = 0; kw < Kw; ++kw) {
                  const T wv = wc[(kd * Kh + kh) * Kw + kw];
                  if (s == 1) {
                    // iw = ow + kw - p
                    const int64_t base = kw - p;
                    const int64_t lo = std::max<int64_t>(0, base);
                    const int64_t hi = std::min<int64_t>(W - 1, Wo - 1 + base);
                    const T* go = gyrow - base;
                    for (int64_t iw = lo; iw <= hi; ++iw) {
                      gxrow[iw] += wv * go[iw];
                    }
                  } else {
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                      const int64_t iw = ow * s - p + kw;
                      if (iw < 0 || iw >= W) continue;
                      gxrow[iw] += wv * gyrow[ow];
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> conv3d_backward_weight(const Tensor<T>& gy, const Tensor<T>& x,
                                 const Conv3dSpec& spec,
                                 const std::vector<int64_t>& weight_shape) {
  detail::check_conv_args(x.shape(), weight_shape, spec);
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t Cout = weight_shape[0], Cg = weight_shape[1],
                Kd = weight_shape[2], Kh = weight_shape[3], Kw = weight_shape[4];
  const int64_t s = spec.stride, p = spec.padding;
  const int64_t Do = gy.extent(2), Ho = gy.extent(3), Wo = gy.extent(4);
  const int64_t cout_per_group = Cout / spec.groups;

  Tensor<T> gw(weight_shape);
  const T* gyd = gy.data();
  const T* xd = x.data();
  T* gwd = gw.data();

#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < Cout; ++co) {
    const int64_t g = co / cout_per_group;
    for (int64_t ci = 0; ci < Cg; ++ci) {
      for (int64_t kd = 0; kd < Kd; ++kd) {
        for (int64_t kh = 0; kh < Kh; ++kh) {
          for (int64_t kw = 0; kw < Kw; ++kw) {
            T acc = 0;
            for (int64_t n = 0; n < N; ++n) {
              const T* gyc = gyd + ((n * Cout + co) * Do) * Ho * Wo;
              const T* xc = xd + ((n * Cin + g * Cg + ci) * D) * H * W;
              for (int64_t od = 0; od < Do; ++od) {
                const int64_t id = od * s - p + kd;
                if (id < 0 || id >= D) continue;
                for (int64_t oh = 0; oh < Ho; ++oh) {
                  const int64_t ih = oh * s - p + kh;
                  if (ih < 0 || ih >= H) continue;
                  const T* gyrow = gyc + (od * Ho + oh) * Wo;
                  const T* xrow = xc + (id * H + ih) * W;
                  const int64_t base = kw - p;
                  const int64_t lo = std::max<int64_t>(0, idiv_ceil(-base, s));
                  const int64_t hi =
                      std::min<int64_t>(Wo - 1, idiv_floor(W - 1 - base, s));
                  for (int64_t ow = lo; ow <= hi; ++ow) {
                    acc += gyrow[ow] * xrow[ow * s + base];
                  }
                }
              }
            }
            gwd[(((co * Cg + ci) * Kd + kd) * Kh + kh) * Kw + kw] = acc;
          }
        }
      }
    }
  }
  return gw;
}

template <class T>
Tensor<T> conv3d_backward_bias(const Tensor<T>& gy) {
  detail::check_rank5(gy.shape(), "conv3d_backward_bias");
  const int64_t N = gy.extent(0), C = gy.extent(1);
  const int64_t V = gy.extent(2) * gy.extent(3) * gy.extent(4);
  Tensor<T> gb({C});
  const T* gyd = gy.data();
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* row = gyd + (n * C + c) * V;
      for (int64_t v = 0; v < V; ++v) acc += row[v];
    }
    gb[c] = acc;
  }
  return gb;
}

// Fractionally strided convolution used for decoder upsampling. Weight is
// (Cin, Cout, kd, kh, kw); output extent is (in-1)*stride + k. As a linear
// map of x it is the exact adjoint of conv3d with the same weight, stride
// and zero padding.
template <class T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<std::type_identity_t<T>>* bias,
                            int64_t stride) {
  detail::check_rank5(x.shape(), "transposed_conv3d");
  if (w.rank() != 5 || w.extent(0) != x.extent(1)) {
    throw ShapeError("transposed_conv3d: weight must be (Cin, Cout, k, k, k)");
  }
  if (stride < 1) throw ShapeError("transposed_conv3d: bad stride");
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t Cout = w.extent(1), Kd = w.extent(2), Kh = w.extent(3),
                Kw = w.extent(4);
  const int64_t Do = (D - 1) * stride + Kd;
  const int64_t Ho = (H - 1) * stride + Kh;
  const int64_t Wo = (W - 1) * stride + Kw;
  if (bias && (bias->rank() != 1 || bias->extent(0) != Cout)) {
    throw ShapeError("transposed_conv3d: bias must have shape (Cout)");
  }

  Tensor<T> y({N, Cout, Do, Ho, Wo});
  const T* xd = x.data();
  const T* wd = w.data();
  T* yd = y.data();

#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      for (int64_t qd = 0; qd < Do; ++qd) {
        T* yplane = yd + (((n * Cout + co) * Do + qd) * Ho) * Wo;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T* xc = xd + ((n * Cin + ci) * D) * H * W;
          const T* wc = wd + ((ci * Cout + co) * Kd) * Kh * Kw;
          for (int64_t kd = 0; kd < Kd; ++kd) {
            const int64_t num_d = qd - kd;
            if (num_d % stride != 0) continue;
            const int64_t od = num_d / stride;
            if (od < 0 || od >= D) continue;
            for (int64_t kh = 0; kh < Kh; ++kh) {
              for (int64_t qh = 0; qh < Ho; ++qh) {
                const int64_t num_h = qh - kh;
                if (num_h % stride != 0) continue;
                const int64_t oh = num_h / stride;
                if (oh < 0 || oh >= H) continue;
                const T* xrow = xc + (od * H + oh) * W;
                T* yrow = yplane + qh * Wo;
                for (int64_t kw = 0; kw < Kw; ++kw) {
                  const T wv = wc[(kd * Kh + kh) * Kw + kw];
                  for (int64_t ow = 0; ow < W; ++ow) {
                    yrow[ow * stride + kw] += wv * xrow[ow];
                  }
                }
              }
            }
          }
        }
        if (bias) {
          const T b = (*bias)[co];
          for (int64_t i = 0; i < Ho * Wo; ++i) yplane[i] += b;
        }
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> transposed_conv3d_backward_input(const Tensor<T>& gy,
                                           const Tensor<T>& w, int64_t stride,
                                           const std::vector<int64_t>& in_shape) {
  const int64_t N = in_shape[0], Cin = in_shape[1], D = in_shape[2],
                H = in_shape[3], W = in_shape[4];
  const int64_t Cout = w.extent(1), Kd = w.extent(2), Kh = w.extent(3),
                Kw = w.extent(4);
  const int64_t Ho = gy.extent(3), Wo = gy.extent(4);
  Tensor<T> gx(in_shape);
  const T* gyd = gy.data();
  const T* wd = w.data();
  T* gxd = gx.data();

#pragma omp parallel for collapse(3) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
      for (int64_t od = 0; od < D; ++od) {
        T* gxplane = gxd + (((n * Cin + ci) * D + od) * H) * W;
        for (int64_t co = 0; co < Cout; ++co) {
          const T* gyc = gyd + ((n * Cout + co) * gy.extent(2)) * Ho * Wo;
          const T* wc = wd + ((ci * Cout + co) * Kd) * Kh * Kw;
          for (int64_t kd = 0; kd < Kd; ++kd) {
            const int64_t qd = od * stride + kd;
            for (int64_t oh = 0; oh < H; ++oh) {
              T* gxrow = gxplane + oh * W;
              for (int64_t kh = 0; kh < Kh; ++kh) {
                const int64_t qh = oh * stride + kh;
                const T* gyrow = gyc + (qd * Ho + qh) * Wo;
                for (int64_t kw = 0; kw < Kw; ++kw) {
                  const T wv = wc[(kd * Kh + kh) * Kw + kw];
                  for (int64_t ow = 0; ow < W; ++ow) {
                    gxrow[ow] += wv * gyrow[ow * stride + kw];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> transposed_conv3d_backward_weight(
    const Tensor<T>& gy, const Tensor<T>& x, int64_t stride,
    const std::vector<int64_t>& weight_shape) {
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t Cout = weight_shape[1], Kd = weight_shape[2],
                Kh = weight_shape[3], Kw = weight_shape[4];
  const int64_t Ho = gy.extent(3), Wo = gy.extent(4);
  Tensor<T> gw(weight_shape);
  const T* gyd = gy.data();
  const T* xd = x.data();
  T* gwd = gw.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ci = 0; ci < Cin; ++ci) {
    for (int64_t co = 0; co < Cout; ++co) {
      for (int64_t kd = 0; kd < Kd; ++kd) {
        for (int64_t kh = 0; kh < Kh; ++kh) {
          for (int64_t kw = 0; kw < Kw; ++kw) {
            T acc = 0;
            for (int64_t n = 0; n < N; ++n) {
              const T* xc = xd + ((n * Cin + ci) * D) * H * W;
              const T* gyc = gyd + ((n * Cout + co) * gy.extent(2)) * Ho * Wo;
              for (int64_t od = 0; od < D; ++od) {
                for (int64_t oh = 0; oh < H; ++oh) {
                  const T* xrow = xc + (od * H + oh) * W;
                  const T* gyrow =
                      gyc + ((od * stride + kd) * Ho + oh * stride + kh) * Wo;
                  for (int64_t ow = 0; ow < W; ++ow) {
                    acc += xrow[ow] * gyrow[ow * stride + kw];
                  }
                }
              }
            }
            gwd[(((ci * Cout + co) * Kd + kd) * Kh + kh) * Kw + kw] = acc;
          }
        }
      }
    }
  }
  return gw;
}

// y[n,:,v] = weight @ x[n,:,v] + bias, applied at every voxel
template <class T>
Tensor<T> pointwise_linear(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<std::type_identity_t<T>>* bias) {
  detail::check_rank5(x.shape(), "pointwise_linear");
  if (weight.rank() != 2 || weight.extent(1) != x.extent(1)) {
    throw ShapeError("pointwise_linear: weight (out,in) vs input " +
                     shape_string(x.shape()));
  }
  const int64_t N = x.extent(0), Cin = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  const int64_t Cout = weight.extent(0);
  if (bias && (bias->rank() != 1 || bias->extent(0) != Cout)) {
    throw ShapeError("pointwise_linear: bias must have shape (out)");
  }
  Tensor<T> y({N, Cout, x.extent(2), x.extent(3), x.extent(4)});
  const T* xd = x.data();
  const T* wd = weight.data();
  T* yd = y.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      const T* xn = xd + n * Cin * V;
      T* yrow = yd + (n * Cout + co) * V;
      if (bias) {
        const T b = (*bias)[co];
        for (int64_t v = 0; v < V; ++v) yrow[v] = b;
      }
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T wv = wd[co * Cin + ci];
        const T* xrow = xn + ci * V;
        for (int64_t v = 0; v < V; ++v) yrow[v] += wv * xrow[v];
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> pointwise_linear_backward_input(const Tensor<T>& gy,
                                          const Tensor<T>& weight,
                                          const std::vector<int64_t>& in_shape) {
  const int64_t N = in_shape[0], Cin = in_shape[1];
  const int64_t V = in_shape[2] * in_shape[3] * in_shape[4];
  const int64_t Cout = weight.extent(0);
  Tensor<T> gx(in_shape);
  const T* gyd = gy.data();
  const T* wd = weight.data();
  T* gxd = gx.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
      T* gxrow = gxd + (n * Cin + ci) * V;
      for (int64_t co = 0; co < Cout; ++co) {
        const T wv = wd[co * Cin + ci];
        const T* gyrow = gyd + (n * Cout + co) * V;
        for (int64_t v = 0; v < V; ++v) gxrow[v] += wv * gyrow[v];
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> pointwise_linear_backward_weight(const Tensor<T>& gy,
                                           const Tensor<T>& x) {
  const int64_t N = x.extent(0), Cin = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  const int64_t Cout = gy.extent(1);
  Tensor<T> gw({Cout, Cin});
  const T* gyd = gy.data();
  const T* xd = x.data();
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < Cout; ++co) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
      T acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* gyrow = gyd + (n * Cout + co) * V;
        const T* xrow = xd + (n * Cin + ci) * V;
        for (int64_t v = 0; v < V; ++v) acc += gyrow[v] * xrow[v];
      }
      gw[co * Cin + ci] = acc;
    }
  }
  return gw;
}

template <class T>
Tensor<T> pointwise_linear_backward_bias(const Tensor<T>& gy) {
  return conv3d_backward_bias(gy);
}

// Layer norm over the channel axis at each voxel, biased variance.
// C == 1 degenerates to output == beta since the normalized value is 0.
template <class T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, T eps) {
  detail::check_rank5(x.shape(), "layer_norm");
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("layer_norm: gamma/beta must have C elements");
  }
  if (!x.all_finite()) {
    throw NumericError("layer_norm: non-finite input");
  }
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  T* yd = y.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      T* yv = yd + n * C * V + v;
      T m = 0;
      for (int64_t c = 0; c < C; ++c) m += xv[c * V];
      m /= static_cast<T>(C);
      T var = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T d = xv[c * V] - m;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T inv = T(1) / std::sqrt(var + eps);
      for (int64_t c = 0; c < C; ++c) {
        yv[c * V] = (xv[c * V] - m) * inv * gd[c] + bd[c];
      }
    }
  }
  return y;
}

template <class T>
struct LayerNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <class T>
LayerNormGrads<T> layer_norm_channels_backward(const Tensor<T>& gy,
                                               const Tensor<T>& x,
                                               const Tensor<T>& gamma, T eps) {
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({C}), Tensor<T>({C})};
  const T* xd = x.data();
  const T* gyd = gy.data();
  const T* gad = gamma.data();
  T* gxd = g.x.data();

  // hoist per-voxel stats so the per-channel reductions stay O(C * N * V)
  std::vector<T> mu(static_cast<size_t>(N * V));
  std::vector<T> inv(static_cast<size_t>(N * V));
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      T m = 0;
      for (int64_t c = 0; c < C; ++c) m += xv[c * V];
      m /= static_cast<T>(C);
      T var = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T d = xv[c * V] - m;
        var += d * d;
      }
      var /= static_cast<T>(C);
      mu[static_cast<size_t>(n * V + v)] = m;
      inv[static_cast<size_t>(n * V + v)] = T(1) / std::sqrt(var + eps);
    }
  }

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      const T* gyv = gyd + n * C * V + v;
      T* gxv = gxd + n * C * V + v;
      const T m = mu[static_cast<size_t>(n * V + v)];
      const T iv = inv[static_cast<size_t>(n * V + v)];
      T mean_dxhat = 0, mean_dxhat_xhat = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T xhat = (xv[c * V] - m) * iv;
        const T dxhat = gyv[c * V] * gad[c];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
      }
      mean_dxhat /= static_cast<T>(C);
      mean_dxhat_xhat /= static_cast<T>(C);
      for (int64_t c = 0; c < C; ++c) {
        const T xhat = (xv[c * V] - m) * iv;
        const T dxhat = gyv[c * V] * gad[c];
        gxv[c * V] = iv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
      }
    }
  }

  T* ggd = g.gamma.data();
  T* gbd = g.beta.data();
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    T gg = 0, gb = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* xc = xd + (n * C + c) * V;
      const T* gyc = gyd + (n * C + c) * V;
      for (int64_t v = 0; v < V; ++v) {
        const T xhat = (xc[v] - mu[static_cast<size_t>(n * V + v)]) *
                       inv[static_cast<size_t>(n * V + v)];
        gg += gyc[v] * xhat;
        gb += gyc[v];
      }
    }
    ggd[c] = gg;
    gbd[c] = gb;
  }
  return g;
}

// exact gaussian cdf form: x * Phi(x)
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(xd[i]);
    yd[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& gy, const Tensor<T>& x) {
  Tensor<T> gx(x.shape());
  const T* xd = x.data();
  const T* gyd = gy.data();
  T* gxd = gx.data();
  const int64_t n = x.numel();
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(xd[i]);
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    gxd[i] = static_cast<T>(static_cast<double>(gyd[i]) * (cdf + v * pdf));
  }
  return gx;
}

// channel softmax with max subtraction for stability
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  detail::check_rank5(x.shape(), "softmax");
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  Tensor<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      T* yv = yd + n * C * V + v;
      T mx = xv[0];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xv[c * V]);
      T z = 0;
      for (int64_t c = 0; c < C; ++c) {
        const T e = std::exp(xv[c * V] - mx);
        yv[c * V] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (int64_t c = 0; c < C; ++c) yv[c * V] *= invz;
    }
  }
  return y;
}

template <class T>
Tensor<T> softmax_channels_backward(const Tensor<T>& gy, const Tensor<T>& p) {
  const int64_t N = p.extent(0), C = p.extent(1);
  const int64_t V = p.extent(2) * p.extent(3) * p.extent(4);
  Tensor<T> gx(p.shape());
  const T* pd = p.data();
  const T* gyd = gy.data();
  T* gxd = gx.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* pv = pd + n * C * V + v;
      const T* gyv = gyd + n * C * V + v;
      T* gxv = gxd + n * C * V + v;
      T s = 0;
      for (int64_t c = 0; c < C; ++c) s += gyv[c * V] * pv[c * V];
      for (int64_t c = 0; c < C; ++c) {
        gxv[c * V] = pv[c * V] * (gyv[c * V] - s);
      }
    }
  }
  return gx;
}

// ties resolve to the lowest channel index
template <class T>
Tensor<int32_t> argmax_channels(const Tensor<T>& x) {
  detail::check_rank5(x.shape(), "argmax");
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  Tensor<int32_t> out({N, x.extent(2), x.extent(3), x.extent(4)});
  const T* xd = x.data();
  int32_t* od = out.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      int32_t best = 0;
      T bestv = xv[0];
      for (int64_t c = 1; c < C; ++c) {
        if (xv[c * V] > bestv) {
          bestv = xv[c * V];
          best = static_cast<int32_t>(c);
        }
      }
      od[n * V + v] = best;
    }
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank5(a.shape(), "concat_channels");
  detail::check_rank5(b.shape(), "concat_channels");
  for (int axis : {0, 2, 3, 4}) {
    if (a.extent(axis) != b.extent(axis)) {
      throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    }
  }
  const int64_t N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1);
  const int64_t V = a.extent(2) * a.extent(3) * a.extent(4);
  Tensor<T> out({N, Ca + Cb, a.extent(2), a.extent(3), a.extent(4)});
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    std::copy(ad + n * Ca * V, ad + (n + 1) * Ca * V,
              od + n * (Ca + Cb) * V);
    std::copy(bd + n * Cb * V, bd + (n + 1) * Cb * V,
              od + n * (Ca + Cb) * V + Ca * V);
  }
  return out;
}

// channels [c0, c1) of x
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t c1) {
  detail::check_rank5(x.shape(), "slice_channels");
  const int64_t N = x.extent(0), C = x.extent(1);
  if (c0 < 0 || c1 <= c0 || c1 > C) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(c0) +
                     ", " + std::to_string(c1) + ") for C=" + std::to_string(C));
  }
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  Tensor<T> out({N, c1 - c0, x.extent(2), x.extent(3), x.extent(4)});
  const T* xd = x.data();
  T* od = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    std::copy(xd + (n * C + c0) * V, xd + (n * C + c1) * V,
              od + n * (c1 - c0) * V);
  }
  return out;
}

}  // namespace voldeform
