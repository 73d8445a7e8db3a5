#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "voldeform/ops.hpp"
#include "voldeform/tensor.hpp"

// Deformable 3d convolution with per-voxel fractional offsets and trilinear
// sampling, stride 1, same padding. Sampling positions outside the volume
// contribute zero through per-corner validity, so offsets may push taps
// arbitrarily far out of bounds. The interpolation cell is chosen by floor,
// which makes offset gradients right-continuous at integer positions.
//
// Offset fields have shape (N, 3K, D, H, W). Channel axis*K + k holds the
// displacement of tap k along one axis, with axis 0 = height, 1 = width,
// 2 = depth. One field is shared by every image channel.
//
// The _naive variants are direct serial transcriptions of the defining sum
// and exist as references for the optimized paths; keep them free of
// blocking, precomputation and parallelism.

namespace voldeform {

struct SamplingGrid {
  int64_t kd = 3, kh = 3, kw = 3;

  int64_t taps() const { return kd * kh * kw; }

  // depth-major tap order; displacements are relative to the center tap
  std::array<int64_t, 3> tap(int64_t k) const {
    const int64_t tw = k % kw;
    const int64_t th = (k / kw) % kh;
    const int64_t td = k / (kw * kh);
    return {td - (kd - 1) / 2, th - (kh - 1) / 2, tw - (kw - 1) / 2};
  }

  void validate() const {
    if (kd < 1 || kh < 1 || kw < 1 || kd % 2 == 0 || kh % 2 == 0 ||
        kw % 2 == 0) {
      throw ShapeError("sampling grid extents must be odd and positive");
    }
  }
};

// Which offset axes are live. Displacements on masked axes are treated as
// zero and their offset gradients are identically zero.
struct PlaneMask {
  bool height = true;
  bool width = true;
  bool depth = true;

  void validate() const {
    if (!height && !width && !depth) {
      throw ShapeError("plane mask must keep at least one axis");
    }
  }
};

inline int64_t offset_channel(int64_t axis, int64_t k, int64_t K) {
  return axis * K + k;
}

template <class T>
struct DepthwiseDeformWeights {
  Tensor<T> weight;  // (C, K)
  Tensor<T> bias;    // (C) or empty
};

template <class T>
struct StandardDeformWeights {
  Tensor<T> weight;  // (Cout, Cin/groups, K)
  Tensor<T> bias;    // (Cout) or empty
  int64_t groups = 1;
};

namespace detail {

// One interpolation point. valid bit j covers corner (a,b,c), j = a*4+b*2+c.
// A corner can be valid with value weight exactly 0 (fractional part 0);
// such corners still matter for position gradients.
template <class T>
struct InterpPoint {
  std::array<int64_t, 8> idx;  // flat spatial offsets, 0 when invalid
  std::array<T, 8> w;
  T fd, fh, fw;
  uint8_t valid;
  bool inside;
};

template <class T>
inline void make_point(T pd, T ph, T pw, int64_t D, int64_t H, int64_t W,
                       InterpPoint<T>& pt) {
  if (pd <= T(-1) || static_cast<T>(D) <= pd || ph <= T(-1) ||
      static_cast<T>(H) <= ph || pw <= T(-1) || static_cast<T>(W) <= pw) {
    pt.inside = false;
    pt.valid = 0;
    return;
  }
  pt.inside = true;
  const int64_t d0 = static_cast<int64_t>(std::floor(pd));
  const int64_t h0 = static_cast<int64_t>(std::floor(ph));
  const int64_t w0 = static_cast<int64_t>(std::floor(pw));
  const T fd = pd - static_cast<T>(d0);
  const T fh = ph - static_cast<T>(h0);
  const T fw = pw - static_cast<T>(w0);
  pt.fd = fd;
  pt.fh = fh;
  pt.fw = fw;
  const T wd[2] = {T(1) - fd, fd};
  const T wh[2] = {T(1) - fh, fh};
  const T ww[2] = {T(1) - fw, fw};
  uint8_t valid = 0;
  int j = 0;
  for (int a = 0; a < 2; ++a) {
    const int64_t d = d0 + a;
    const bool dok = d >= 0 && d < D;
    for (int b = 0; b < 2; ++b) {
      const int64_t h = h0 + b;
      const bool hok = dok && h >= 0 && h < H;
      for (int c = 0; c < 2; ++c) {
        const int64_t w = w0 + c;
        const bool ok = hok && w >= 0 && w < W;
        pt.idx[j] = ok ? (d * H + h) * W + w : 0;
        pt.w[j] = ok ? wd[a] * wh[b] * ww[c] : T(0);
        valid = static_cast<uint8_t>(valid | (ok ? (1u << j) : 0u));
        ++j;
      }
    }
  }
  pt.valid = valid;
}

template <class T>
inline T point_value(const InterpPoint<T>& pt, const T* vol) {
  if (!pt.inside) return T(0);
  T v = 0;
  for (int j = 0; j < 8; ++j) v += pt.w[j] * vol[pt.idx[j]];
  return v;
}

// d(sampled value)/d(position), one component per axis
template <class T>
inline void point_position_grad(const InterpPoint<T>& pt, const T* vol,
                                T& gd, T& gh, T& gw) {
  gd = gh = gw = 0;
  if (!pt.inside) return;
  const T wd[2] = {T(1) - pt.fd, pt.fd};
  const T wh[2] = {T(1) - pt.fh, pt.fh};
  const T ww[2] = {T(1) - pt.fw, pt.fw};
  int j = 0;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int c = 0; c < 2; ++c) {
        if (pt.valid & (1u << j)) {
          const T x = vol[pt.idx[j]];
          const T sa = a ? T(1) : T(-1);
          const T sb = b ? T(1) : T(-1);
          const T sc = c ? T(1) : T(-1);
          gd += sa * wh[b] * ww[c] * x;
          gh += wd[a] * sb * ww[c] * x;
          gw += wd[a] * wh[b] * sc * x;
        }
        ++j;
      }
    }
  }
}

template <class T>
inline void point_scatter(const InterpPoint<T>& pt, T g, T* vol) {
  if (!pt.inside) return;
  for (int j = 0; j < 8; ++j) {
    if (pt.valid & (1u << j)) vol[pt.idx[j]] += g * pt.w[j];
  }
}

template <class T>
inline void check_deform_args(const Tensor<T>& x, const Tensor<T>& offsets,
                              const SamplingGrid& grid, const PlaneMask& mask,
                              const char* what) {
  grid.validate();
  mask.validate();
  if (x.rank() != 5) {
    throw ShapeError(std::string(what) + ": input must be NCDHW");
  }
  const int64_t K = grid.taps();
  if (offsets.rank() != 5 || offsets.extent(0) != x.extent(0) ||
      offsets.extent(1) != 3 * K || offsets.extent(2) != x.extent(2) ||
      offsets.extent(3) != x.extent(3) || offsets.extent(4) != x.extent(4)) {
    throw ShapeError(std::string(what) + ": offset field must be (N, 3K, D, H, W) with K = " +
                     std::to_string(K) + ", got " + shape_string(offsets.shape()));
  }
  if (!offsets.all_finite()) {
    throw NumericError(std::string(what) + ": non-finite offsets");
  }
}

// displacement reads with the plane mask applied; offv points at the voxel
// within offset channel 0
template <class T>
inline void read_displacement(const T* offv, int64_t K, int64_t V, int64_t k,
                              const PlaneMask& mask, T& dd, T& dh, T& dw) {
  dh = mask.height ? offv[k * V] : T(0);
  dw = mask.width ? offv[(K + k) * V] : T(0);
  dd = mask.depth ? offv[(2 * K + k) * V] : T(0);
}

}  // namespace detail

// single checked sample; vol is a rank-3 (D, H, W) tensor
template <class T>
T trilinear_sample(const Tensor<T>& vol, T d, T h, T w) {
  if (vol.rank() != 3) {
    throw ShapeError("trilinear_sample: volume must be rank 3");
  }
  if (std::isnan(static_cast<double>(d)) ||
      std::isnan(static_cast<double>(h)) ||
      std::isnan(static_cast<double>(w))) {
    throw NumericError("trilinear_sample: NaN position");
  }
  detail::InterpPoint<T> pt;
  detail::make_point(d, h, w, vol.extent(0), vol.extent(1), vol.extent(2), pt);
  return detail::point_value(pt, vol.data());
}

// y[n,c,v] = sum_k weight[c,k] * x[n,c](v + tap_k + offset(v,k)) + bias[c]
template <class T>
Tensor<T> ddc_forward(const Tensor<T>& x, const DepthwiseDeformWeights<T>& wts,
                      const Tensor<T>& offsets, const SamplingGrid& grid,
                      const PlaneMask& mask) {
  detail::check_deform_args(x, offsets, grid, mask, "ddc_forward");
  const int64_t N = x.extent(0), C = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  if (wts.weight.rank() != 2 || wts.weight.extent(0) != C ||
      wts.weight.extent(1) != K) {
    throw ShapeError("ddc_forward: weight must be (C, K)");
  }
  const bool has_bias = wts.bias.defined();
  if (has_bias && wts.bias.numel() != C) {
    throw ShapeError("ddc_forward: bias must have C elements");
  }
  const int64_t V = D * H * W;

  std::vector<std::array<int64_t, 3>> taps(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) taps[static_cast<size_t>(k)] = grid.tap(k);

  Tensor<T> y(x.shape());
  const T* xd = x.data();
  const T* wd = wts.weight.data();
  const T* bd = has_bias ? wts.bias.data() : nullptr;
  const T* od = offsets.data();
  T* yd = y.data();

#pragma omp parallel
  {
    std::vector<detail::InterpPoint<T>> pts(static_cast<size_t>(K));
#pragma omp for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t zd = 0; zd < D; ++zd) {
        for (int64_t zh = 0; zh < H; ++zh) {
          for (int64_t zw = 0; zw < W; ++zw) {
            const int64_t v = (zd * H + zh) * W + zw;
            const T* offv = od + n * 3 * K * V + v;
            for (int64_t k = 0; k < K; ++k) {
              T dd, dh, dw;
              detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
              const auto& t = taps[static_cast<size_t>(k)];
              detail::make_point(static_cast<T>(zd + t[0]) + dd,
                                 static_cast<T>(zh + t[1]) + dh,
                                 static_cast<T>(zw + t[2]) + dw, D, H, W,
                                 pts[static_cast<size_t>(k)]);
            }
            for (int64_t c = 0; c < C; ++c) {
              const T* xc = xd + (n * C + c) * V;
              const T* wc = wd + c * K;
              T acc = 0;
              for (int64_t k = 0; k < K; ++k) {
                acc += wc[k] * detail::point_value(pts[static_cast<size_t>(k)], xc);
              }
              if (has_bias) acc += bd[c];
              yd[(n * C + c) * V + v] = acc;
            }
          }
        }
      }
    }
  }
  return y;
}

// direct transcription of the defining sum, serial, own trilinear code
template <class T>
Tensor<T> ddc_forward_naive(const Tensor<T>& x,
                            const DepthwiseDeformWeights<T>& wts,
                            const Tensor<T>& offsets, const SamplingGrid& grid,
                            const PlaneMask& mask) {
  detail::check_deform_args(x, offsets, grid, mask, "ddc_forward_naive");
  const int64_t N = x.extent(0), C = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  if (wts.weight.rank() != 2 || wts.weight.extent(0) != C ||
      wts.weight.extent(1) != K) {
    throw ShapeError("ddc_forward_naive: weight must be (C, K)");
  }
  const bool has_bias = wts.bias.defined();
  const int64_t V = D * H * W;
  Tensor<T> y(x.shape());

  auto sample = [&](const T* vol, T pd, T ph, T pw) -> T {
    if (pd <= T(-1) || static_cast<T>(D) <= pd || ph <= T(-1) ||
        static_cast<T>(H) <= ph || pw <= T(-1) || static_cast<T>(W) <= pw) {
      return T(0);
    }
    T acc = 0;
    const int64_t d0 = static_cast<int64_t>(std::floor(static_cast<double>(pd)));
    const int64_t h0 = static_cast<int64_t>(std::floor(static_cast<double>(ph)));
    const int64_t w0 = static_cast<int64_t>(std::floor(static_cast<double>(pw)));
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 2; ++c) {
          const int64_t dI = d0 + a, hI = h0 + b, wI = w0 + c;
          if (dI < 0 || dI >= D || hI < 0 || hI >= H || wI < 0 || wI >= W) {
            continue;
          }
          const T wgt = (a ? pd - static_cast<T>(d0) : static_cast<T>(d0 + 1) - pd) *
                        (b ? ph - static_cast<T>(h0) : static_cast<T>(h0 + 1) - ph) *
                        (c ? pw - static_cast<T>(w0) : static_cast<T>(w0 + 1) - pw);
          acc += wgt * vol[(dI * H + hI) * W + wI];
        }
      }
    }
    return acc;
  };

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* xc = x.data() + (n * C + c) * V;
      for (int64_t zd = 0; zd < D; ++zd) {
        for (int64_t zh = 0; zh < H; ++zh) {
          for (int64_t zw = 0; zw < W; ++zw) {
            T acc = 0;
            for (int64_t k = 0; k < K; ++k) {
              const auto t = grid.tap(k);
              const int64_t v = (zd * H + zh) * W + zw;
              const T* offv = offsets.data() + n * 3 * K * V + v;
              T dd, dh, dw;
              detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
              acc += wts.weight[c * K + k] *
                     sample(xc, static_cast<T>(zd + t[0]) + dd,
                            static_cast<T>(zh + t[1]) + dh,
                            static_cast<T>(zw + t[2]) + dw);
            }
            if (has_bias) acc += wts.bias[c];
            y[(n * C + c) * V + (zd * H + zh) * W + zw] = acc;
          }
        }
      }
    }
  }
  return y;
}

template <class T>
struct DdcGrads {
  Tensor<T> x;
  Tensor<T> weight;
  Tensor<T> offsets;
  Tensor<T> bias;  // defined only when the forward had a bias
};

// lets callers skip gradient passes for inputs that are not being trained
struct DeformGradNeeds {
  bool x = true;
  bool weight = true;
  bool offsets = true;
};

// Analytic backward. Work is partitioned so every output cell of every
// gradient tensor is accumulated by exactly one thread in a fixed order:
// grad_x and grad_weight by channel, grad_offsets by voxel column, with
// interpolation geometry shared through a per-row cache.
template <class T>
DdcGrads<T> ddc_backward(const Tensor<T>& gy, const Tensor<T>& x,
                         const DepthwiseDeformWeights<T>& wts,
                         const Tensor<T>& offsets, const SamplingGrid& grid,
                         const PlaneMask& mask,
                         const DeformGradNeeds& needs = {}) {
  detail::check_deform_args(x, offsets, grid, mask, "ddc_backward");
  check_same_shape(gy, x, "ddc_backward");
  const int64_t N = x.extent(0), C = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  const int64_t V = D * H * W;
  const bool has_bias = wts.bias.defined();

  std::vector<std::array<int64_t, 3>> taps(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) taps[static_cast<size_t>(k)] = grid.tap(k);

  DdcGrads<T> g;
  if (needs.x) g.x = Tensor<T>(x.shape());
  if (needs.weight) g.weight = Tensor<T>(wts.weight.shape());
  if (needs.offsets) g.offsets = Tensor<T>(offsets.shape());
  if (has_bias) g.bias = conv3d_backward_bias(gy);

  const T* xd = x.data();
  const T* gyd = gy.data();
  const T* wd = wts.weight.data();
  const T* od = offsets.data();
  T* gxd = needs.x ? g.x.data() : nullptr;
  T* gwd = needs.weight ? g.weight.data() : nullptr;
  T* god = needs.offsets ? g.offsets.data() : nullptr;

  std::vector<detail::InterpPoint<T>> row(static_cast<size_t>(W * K));

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t zd = 0; zd < D; ++zd) {
      for (int64_t zh = 0; zh < H; ++zh) {
        const int64_t vrow = (zd * H + zh) * W;

#pragma omp parallel for schedule(static)
        for (int64_t zw = 0; zw < W; ++zw) {
          const T* offv = od + n * 3 * K * V + vrow + zw;
          for (int64_t k = 0; k < K; ++k) {
            T dd, dh, dw;
            detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
            const auto& t = taps[static_cast<size_t>(k)];
            detail::make_point(static_cast<T>(zd + t[0]) + dd,
                               static_cast<T>(zh + t[1]) + dh,
                               static_cast<T>(zw + t[2]) + dw, D, H, W,
                               row[static_cast<size_t>(zw * K + k)]);
          }
        }

        // grad_x scatter and grad_weight gather, channel-owned
        if (needs.x || needs.weight) {
#pragma omp parallel for schedule(static)
          for (int64_t c = 0; c < C; ++c) {
            const T* xc = xd + (n * C + c) * V;
            const T* gyc = gyd + (n * C + c) * V + vrow;
            const T* wc = wd + c * K;
            T* gxc = needs.x ? gxd + (n * C + c) * V : nullptr;
            T* gwc = needs.weight ? gwd + c * K : nullptr;
            for (int64_t zw = 0; zw < W; ++zw) {
              const T go = gyc[zw];
              for (int64_t k = 0; k < K; ++k) {
                const auto& pt = row[static_cast<size_t>(zw * K + k)];
                if (gwc) gwc[k] += go * detail::point_value(pt, xc);
                if (gxc) detail::point_scatter(pt, go * wc[k], gxc);
              }
            }
          }
        }

        // grad_offsets, voxel-owned, channel sum inside
        if (needs.offsets) {
#pragma omp parallel for schedule(static)
          for (int64_t zw = 0; zw < W; ++zw) {
            T* gov = god + n * 3 * K * V + vrow + zw;
            for (int64_t k = 0; k < K; ++k) {
              const auto& pt = row[static_cast<size_t>(zw * K + k)];
              if (!pt.inside) continue;
              T ad = 0, ah = 0, aw = 0;
              for (int64_t c = 0; c < C; ++c) {
                const T* xc = xd + (n * C + c) * V;
                T gd, gh, gw;
                detail::point_position_grad(pt, xc, gd, gh, gw);
                const T f = gyd[(n * C + c) * V + vrow + zw] * wd[c * K + k];
                ad += f * gd;
                ah += f * gh;
                aw += f * gw;
              }
              if (mask.height) gov[k * V] = ah;
              if (mask.width) gov[(K + k) * V] = aw;
              if (mask.depth) gov[(2 * K + k) * V] = ad;
            }
          }
        }
      }
    }
  }
  return g;
}

// y[n,co,v] = sum_{ci in group(co), k} w[co,ci',k] * x[n,ci](v + tap_k + off)
// one offset field shared across all channels and groups
template <class T>
Tensor<T> standard_deform_forward(const Tensor<T>& x,
                                  const StandardDeformWeights<T>& wts,
                                  const Tensor<T>& offsets,
                                  const SamplingGrid& grid,
                                  const PlaneMask& mask) {
  detail::check_deform_args(x, offsets, grid, mask, "standard_deform_forward");
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  const int64_t G = wts.groups;
  if (wts.weight.rank() != 3 || wts.weight.extent(2) != K) {
    throw ShapeError("standard_deform_forward: weight must be (Cout, Cin/groups, K)");
  }
  if (G < 1 || Cin % G != 0 || wts.weight.extent(1) != Cin / G ||
      wts.weight.extent(0) % G != 0) {
    throw ShapeError("standard_deform_forward: bad group structure");
  }
  const int64_t Cout = wts.weight.extent(0);
  const int64_t Cg = Cin / G;
  const int64_t cout_per_group = Cout / G;
  const bool has_bias = wts.bias.defined();
  const int64_t V = D * H * W;

  std::vector<std::array<int64_t, 3>> taps(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) taps[static_cast<size_t>(k)] = grid.tap(k);

  Tensor<T> y({N, Cout, D, H, W});
  const T* xd = x.data();
  const T* wd = wts.weight.data();
  const T* od = offsets.data();
  T* yd = y.data();

#pragma omp parallel
  {
    std::vector<detail::InterpPoint<T>> pts(static_cast<size_t>(K));
    std::vector<T> samples(static_cast<size_t>(Cin * K));
#pragma omp for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t zd = 0; zd < D; ++zd) {
        for (int64_t zh = 0; zh < H; ++zh) {
          for (int64_t zw = 0; zw < W; ++zw) {
            const int64_t v = (zd * H + zh) * W + zw;
            const T* offv = od + n * 3 * K * V + v;
            for (int64_t k = 0; k < K; ++k) {
              T dd, dh, dw;
              detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
              const auto& t = taps[static_cast<size_t>(k)];
              detail::make_point(static_cast<T>(zd + t[0]) + dd,
                                 static_cast<T>(zh + t[1]) + dh,
                                 static_cast<T>(zw + t[2]) + dw, D, H, W,
                                 pts[static_cast<size_t>(k)]);
            }
            for (int64_t ci = 0; ci < Cin; ++ci) {
              const T* xc = xd + (n * Cin + ci) * V;
              for (int64_t k = 0; k < K; ++k) {
                samples[static_cast<size_t>(ci * K + k)] =
                    detail::point_value(pts[static_cast<size_t>(k)], xc);
              }
            }
            for (int64_t co = 0; co < Cout; ++co) {
              const int64_t gidx = co / cout_per_group;
              const T* wc = wd + co * Cg * K;
              const T* sg = samples.data() + gidx * Cg * K;
              T acc = 0;
              for (int64_t i = 0; i < Cg * K; ++i) acc += wc[i] * sg[i];
              if (has_bias) acc += wts.bias[co];
              yd[(n * Cout + co) * V + v] = acc;
            }
          }
        }
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> standard_deform_forward_naive(const Tensor<T>& x,
                                        const StandardDeformWeights<T>& wts,
                                        const Tensor<T>& offsets,
                                        const SamplingGrid& grid,
                                        const PlaneMask& mask) {
  detail::check_deform_args(x, offsets, grid, mask, "standard_deform_forward_naive");
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  const int64_t G = wts.groups;
  const int64_t Cout = wts.weight.extent(0);
  const int64_t Cg = Cin / G;
  const int64_t cout_per_group = Cout / G;
  const bool has_bias = wts.bias.defined();
  const int64_t V = D * H * W;
  Tensor<T> y({N, Cout, D, H, W});

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      const int64_t gidx = co / cout_per_group;
      for (int64_t zd = 0; zd < D; ++zd) {
        for (int64_t zh = 0; zh < H; ++zh) {
          for (int64_t zw = 0; zw < W; ++zw) {
            const int64_t v = (zd * H + zh) * W + zw;
            T acc = 0;
            for (int64_t ci = 0; ci < Cg; ++ci) {
              const T* xc = x.data() + (n * Cin + gidx * Cg + ci) * V;
              for (int64_t k = 0; k < K; ++k) {
                const auto t = grid.tap(k);
                const T* offv = offsets.data() + n * 3 * K * V + v;
                T dd, dh, dw;
                detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
                detail::InterpPoint<T> pt;
                detail::make_point(static_cast<T>(zd + t[0]) + dd,
                                   static_cast<T>(zh + t[1]) + dh,
                                   static_cast<T>(zw + t[2]) + dw, D, H, W, pt);
                acc += wts.weight[(co * Cg + ci) * K + k] *
                       detail::point_value(pt, xc);
              }
            }
            if (has_bias) acc += wts.bias[co];
            y[(n * Cout + co) * V + v] = acc;
          }
        }
      }
    }
  }
  return y;
}

template <class T>
struct StandardDeformGrads {
  Tensor<T> x;
  Tensor<T> weight;
  Tensor<T> offsets;
  Tensor<T> bias;
};

template <class T>
StandardDeformGrads<T> standard_deform_backward(
    const Tensor<T>& gy, const Tensor<T>& x,
    const StandardDeformWeights<T>& wts, const Tensor<T>& offsets,
    const SamplingGrid& grid, const PlaneMask& mask,
    const DeformGradNeeds& needs = {}) {
  detail::check_deform_args(x, offsets, grid, mask, "standard_deform_backward");
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t K = grid.taps();
  const int64_t G = wts.groups;
  const int64_t Cout = wts.weight.extent(0);
  const int64_t Cg = Cin / G;
  const int64_t cout_per_group = Cout / G;
  const int64_t V = D * H * W;
  if (gy.rank() != 5 || gy.extent(0) != N || gy.extent(1) != Cout ||
      gy.extent(2) != D || gy.extent(3) != H || gy.extent(4) != W) {
    throw ShapeError("standard_deform_backward: gy shape mismatch");
  }

  std::vector<std::array<int64_t, 3>> taps(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) taps[static_cast<size_t>(k)] = grid.tap(k);

  StandardDeformGrads<T> g;
  if (needs.x) g.x = Tensor<T>(x.shape());
  if (needs.weight) g.weight = Tensor<T>(wts.weight.shape());
  if (needs.offsets) g.offsets = Tensor<T>(offsets.shape());
  if (wts.bias.defined()) g.bias = conv3d_backward_bias(gy);

  const T* xd = x.data();
  const T* gyd = gy.data();
  const T* wd = wts.weight.data();
  const T* od = offsets.data();
  T* gxd = needs.x ? g.x.data() : nullptr;
  T* gwd = needs.weight ? g.weight.data() : nullptr;
  T* god = needs.offsets ? g.offsets.data() : nullptr;

  std::vector<detail::InterpPoint<T>> row(static_cast<size_t>(W * K));
  std::vector<T> samples(static_cast<size_t>(W * Cin * K));

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t zd = 0; zd < D; ++zd) {
      for (int64_t zh = 0; zh < H; ++zh) {
        const int64_t vrow = (zd * H + zh) * W;

#pragma omp parallel for schedule(static)
        for (int64_t zw = 0; zw < W; ++zw) {
          const T* offv = od + n * 3 * K * V + vrow + zw;
          for (int64_t k = 0; k < K; ++k) {
            T dd, dh, dw;
            detail::read_displacement(offv, K, V, k, mask, dd, dh, dw);
            const auto& t = taps[static_cast<size_t>(k)];
            detail::make_point(static_cast<T>(zd + t[0]) + dd,
                               static_cast<T>(zh + t[1]) + dh,
                               static_cast<T>(zw + t[2]) + dw, D, H, W,
                               row[static_cast<size_t>(zw * K + k)]);
          }
          if (needs.weight) {
            for (int64_t ci = 0; ci < Cin; ++ci) {
              const T* xc = xd + (n * Cin + ci) * V;
              for (int64_t k = 0; k < K; ++k) {
                samples[static_cast<size_t>((zw * Cin + ci) * K + k)] =
                    detail::point_value(row[static_cast<size_t>(zw * K + k)], xc);
              }
            }
          }
        }

        // grad_x, input-channel-owned
        if (needs.x) {
#pragma omp parallel for schedule(static)
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const int64_t gidx = ci / Cg;
            const int64_t ci_rel = ci % Cg;
            T* gxc = gxd + (n * Cin + ci) * V;
            for (int64_t zw = 0; zw < W; ++zw) {
              for (int64_t k = 0; k < K; ++k) {
                T factor = 0;
                for (int64_t cg = 0; cg < cout_per_group; ++cg) {
                  const int64_t co = gidx * cout_per_group + cg;
                  factor += gyd[(n * Cout + co) * V + vrow + zw] *
                            wd[(co * Cg + ci_rel) * K + k];
                }
                detail::point_scatter(row[static_cast<size_t>(zw * K + k)],
                                      factor, gxc);
              }
            }
          }
        }

        // grad_weight, output-channel-owned
        if (needs.weight) {
#pragma omp parallel for schedule(static)
          for (int64_t co = 0; co < Cout; ++co) {
            const int64_t gidx = co / cout_per_group;
            T* gwc = gwd + co * Cg * K;
            for (int64_t zw = 0; zw < W; ++zw) {
              const T go = gyd[(n * Cout + co) * V + vrow + zw];
              const T* sg = samples.data() + (zw * Cin + gidx * Cg) * K;
              for (int64_t i = 0; i < Cg * K; ++i) gwc[i] += go * sg[i];
            }
          }
        }

        // grad_offsets, voxel-owned
        if (needs.offsets) {
#pragma omp parallel for schedule(static)
          for (int64_t zw = 0; zw < W; ++zw) {
            T* gov = god + n * 3 * K * V + vrow + zw;
            for (int64_t k = 0; k < K; ++k) {
              const auto& pt = row[static_cast<size_t>(zw * K + k)];
              if (!pt.inside) continue;
              T ad = 0, ah = 0, aw = 0;
              for (int64_t ci = 0; ci < Cin; ++ci) {
                const int64_t gidx = ci / Cg;
                const int64_t ci_rel = ci % Cg;
                const T* xc = xd + (n * Cin + ci) * V;
                T gd, gh, gw;
                detail::point_position_grad(pt, xc, gd, gh, gw);
                T factor = 0;
                for (int64_t cg = 0; cg < cout_per_group; ++cg) {
                  const int64_t co = gidx * cout_per_group + cg;
                  factor += gyd[(n * Cout + co) * V + vrow + zw] *
                            wd[(co * Cg + ci_rel) * K + k];
                }
                ad += factor * gd;
                ah += factor * gh;
                aw += factor * gw;
              }
              if (mask.height) gov[k * V] = ah;
              if (mask.width) gov[(K + k) * V] = aw;
              if (mask.depth) gov[(2 * K + k) * V] = ad;
            }
          }
        }
      }
    }
  }
  return g;
}

template <class T>
Tensor<T> zero_offsets(const Tensor<T>& x, const SamplingGrid& grid) {
  return Tensor<T>({x.extent(0), 3 * grid.taps(), x.extent(2), x.extent(3),
                    x.extent(4)});
}

}  // namespace voldeform
