#pragma once

// Reference implementations for tests, written as direct loop transcriptions
// with no blocking, caching or parallelism so they cannot share a bug with
// the production kernels. Keep them slow and obvious.

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <vector>

#include "voldeform/rng.hpp"
#include "voldeform/tensor.hpp"

namespace oracle {

using voldeform::Tensor;

// plain 7-loop convolution, NCDHW, grouped, zero padded
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<std::type_identity_t<T>>* bias,
                 int64_t stride, int64_t padding, int64_t groups) {
  const int64_t N = x.extent(0), Cin = x.extent(1), D = x.extent(2),
                H = x.extent(3), W = x.extent(4);
  const int64_t Cout = w.extent(0), Cg = w.extent(1), Kd = w.extent(2),
                Kh = w.extent(3), Kw = w.extent(4);
  const int64_t Do = (D + 2 * padding - Kd) / stride + 1;
  const int64_t Ho = (H + 2 * padding - Kh) / stride + 1;
  const int64_t Wo = (W + 2 * padding - Kw) / stride + 1;
  const int64_t cout_per_group = Cout / groups;
  Tensor<T> y({N, Cout, Do, Ho, Wo});
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      const int64_t g = co / cout_per_group;
      for (int64_t od = 0; od < Do; ++od) {
        for (int64_t oh = 0; oh < Ho; ++oh) {
          for (int64_t ow = 0; ow < Wo; ++ow) {
            T acc = 0;
            for (int64_t cg = 0; cg < Cg; ++cg) {
              const int64_t ci = g * Cg + cg;
              for (int64_t kd = 0; kd < Kd; ++kd) {
                for (int64_t kh = 0; kh < Kh; ++kh) {
                  for (int64_t kw = 0; kw < Kw; ++kw) {
                    const int64_t id = od * stride - padding + kd;
                    const int64_t ih = oh * stride - padding + kh;
                    const int64_t iw = ow * stride - padding + kw;
                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 ||
                        iw >= W) {
                      continue;
                    }
                    acc += x[(((n * Cin + ci) * D + id) * H + ih) * W + iw] *
                           w[(((co * Cg + cg) * Kd + kd) * Kh + kh) * Kw + kw];
                  }
                }
              }
            }
            if (bias) acc += (*bias)[co];
            y[(((n * Cout + co) * Do + od) * Ho + oh) * Wo + ow] = acc;
          }
        }
      }
    }
  }
  return y;
}

// zero padded trilinear interpolation of a (D, H, W) volume, written from
// the eight-corner formula
template <class T>
double trilinear(const Tensor<T>& vol, double d, double h, double w) {
  const int64_t D = vol.extent(0), H = vol.extent(1), W = vol.extent(2);
  const double fd = std::floor(d), fh = std::floor(h), fw = std::floor(w);
  const double ad = d - fd, ah = h - fh, aw = w - fw;
  double acc = 0;
  for (int dd = 0; dd < 2; ++dd) {
    for (int dh = 0; dh < 2; ++dh) {
      for (int dw = 0; dw < 2; ++dw) {
        const double cd = fd + dd, ch = fh + dh, cw = fw + dw;
        if (cd < 0 || cd >= static_cast<double>(D) || ch < 0 ||
            ch >= static_cast<double>(H) || cw < 0 ||
            cw >= static_cast<double>(W)) {
          continue;
        }
        const double weight = (dd ? ad : 1 - ad) * (dh ? ah : 1 - ah) *
                              (dw ? aw : 1 - aw);
        acc += weight *
               static_cast<double>(
                   vol[(static_cast<int64_t>(cd) * H +
                        static_cast<int64_t>(ch)) *
                           W +
                       static_cast<int64_t>(cw)]);
      }
    }
  }
  return acc;
}

// max elementwise gap over the magnitude of the larger tensor
template <class T>
double rel_err(const Tensor<T>& got, const Tensor<T>& want) {
  const double scale =
      std::max({voldeform::max_abs(got), voldeform::max_abs(want), 1e-12});
  return voldeform::max_abs_diff(got, want) / scale;
}

template <class T>
Tensor<T> randn(const std::vector<int64_t>& shape, uint64_t seed) {
  return Tensor<T>::randn(shape, seed);
}

}  // namespace oracle
