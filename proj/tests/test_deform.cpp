#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <limits>
#include <vector>

#include "support/oracles.hpp"
#include "voldeform/autograd.hpp"
#include "voldeform/deform.hpp"

using voldeform::DepthwiseDeformWeights;
using voldeform::PlaneMask;
using voldeform::SamplingGrid;
using voldeform::StandardDeformWeights;
using voldeform::Tensor;

namespace {

// offsets whose fractional positions stay safely inside one interpolation
// cell, for finite difference checks near kinks
template <class T>
Tensor<T> safe_offsets(const std::vector<int64_t>& shape, uint64_t seed) {
  Tensor<T> off(shape);
  voldeform::RngStream rng(seed);
  for (int64_t i = 0; i < off.numel(); ++i) {
    off[i] = static_cast<T>(rng.next_uniform(0.1, 0.4));
  }
  return off;
}

const PlaneMask kMasks[] = {
    {true, true, true},   {true, true, false},  {true, false, true},
    {false, true, true},  {true, false, false}, {false, true, false},
    {false, false, true},
};

}  // namespace

TEST_CASE("trilinear sampling is exact on lattice points") {
  auto vol = Tensor<double>::randn({4, 5, 6}, 1);
  for (int64_t d = 0; d < 4; ++d) {
    for (int64_t h = 0; h < 5; ++h) {
      for (int64_t w = 0; w < 6; ++w) {
        const double got = voldeform::trilinear_sample(
            vol, static_cast<double>(d), static_cast<double>(h),
            static_cast<double>(w));
        CHECK(got == vol[(d * 5 + h) * 6 + w]);
      }
    }
  }
}

TEST_CASE("trilinear sampling matches the eight corner oracle") {
  auto vol = Tensor<double>::randn({5, 4, 6}, 2);
  voldeform::RngStream rng(3);
  for (int i = 0; i < 1000; ++i) {
    // positions spill past the volume so the zero padding path is hit
    const double d = rng.next_uniform(-3.0, 8.0);
    const double h = rng.next_uniform(-3.0, 7.0);
    const double w = rng.next_uniform(-3.0, 9.0);
    const double got = voldeform::trilinear_sample(vol, d, h, w);
    const double want = oracle::trilinear(vol, d, h, w);
    CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("trilinear sampling reproduces a trilinear polynomial exactly") {
  // f(d,h,w) = 2 + 3d - h + 0.5w + dh - 0.25dw + 2hw + 0.125dhw is trilinear,
  // so interpolation inside the lattice hull is exact
  auto f = [](double d, double h, double w) {
    return 2 + 3 * d - h + 0.5 * w + d * h - 0.25 * d * w + 2 * h * w +
           0.125 * d * h * w;
  };
  Tensor<double> vol({4, 4, 4});
  for (int64_t d = 0; d < 4; ++d) {
    for (int64_t h = 0; h < 4; ++h) {
      for (int64_t w = 0; w < 4; ++w) {
        vol[(d * 4 + h) * 4 + w] = f(d, h, w);
      }
    }
  }
  voldeform::RngStream rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.next_uniform(0.0, 3.0);
    const double h = rng.next_uniform(0.0, 3.0);
    const double w = rng.next_uniform(0.0, 3.0);
    const double got = voldeform::trilinear_sample(vol, d, h, w);
    CHECK(std::abs(got - f(d, h, w)) <= 1e-12 * std::max(1.0, std::abs(f(d, h, w))));
  }
}

TEST_CASE("trilinear sampling handles absurd positions and rejects NaN") {
  auto vol = Tensor<double>::randn({3, 3, 3}, 5);
  CHECK(voldeform::trilinear_sample(vol, 1e30, 0.0, 0.0) == 0.0);
  CHECK(voldeform::trilinear_sample(vol, 0.0, -1e30, 0.0) == 0.0);
  CHECK(voldeform::trilinear_sample(vol, 0.0, 0.0, 1e300) == 0.0);
  CHECK_THROWS_AS(voldeform::trilinear_sample(
                      vol, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0),
                  voldeform::NumericError);
}

TEST_CASE("ddc frozen single tap case") {
  // one channel, volume (1, 1, 2); only the center tap is weighted and the
  // width displacement there is +0.25
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 2}, {10, 20});
  const SamplingGrid grid;
  const int64_t K = grid.taps();
  Tensor<double> w({1, K});
  w[13] = 1.0;  // center tap (1,1,1)
  Tensor<double> off({1, 3 * K, 1, 1, 2});
  const int64_t V = 2;
  off[(K + 13) * V + 0] = 0.25;
  off[(K + 13) * V + 1] = 0.25;
  DepthwiseDeformWeights<double> wts{w, Tensor<double>()};
  auto y = voldeform::ddc_forward(x, wts, off, grid, PlaneMask{});
  CHECK(y[0] == doctest::Approx(12.5).epsilon(1e-14));  // 0.75*10 + 0.25*20
  CHECK(y[1] == doctest::Approx(15.0).epsilon(1e-14));  // 0.75*20 + 0.25*pad

  // right-continuous subgradient at the integer position: d(sample)/d(dw) at
  // voxel 0 with zero displacement reads the [0, 1) cell, so it is x1 - x0
  Tensor<double> off0({1, 3 * K, 1, 1, 2});
  Tensor<double> gy = Tensor<double>::full({1, 1, 1, 1, 2}, 1.0);
  auto g = voldeform::ddc_backward(gy, x, wts, off0, grid, PlaneMask{});
  CHECK(g.offsets[(K + 13) * V + 0] == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(g.x[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(g.weight[13] == doctest::Approx(30.0).epsilon(1e-14));
}

TEST_CASE("ddc optimized path matches the serial reference on every mask") {
  uint64_t seed = 900;
  for (const auto& mask : kMasks) {
    CAPTURE(mask.height);
    CAPTURE(mask.width);
    CAPTURE(mask.depth);
    auto x = Tensor<double>::randn({2, 3, 4, 5, 3}, seed++);
    auto w = Tensor<double>::randn({3, 27}, seed++);
    auto b = Tensor<double>::randn({3}, seed++);
    auto off = Tensor<double>::randn({2, 81, 4, 5, 3}, seed++, 1.5);
    DepthwiseDeformWeights<double> wts{w, b};
    auto fast = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, mask);
    auto slow = voldeform::ddc_forward_naive(x, wts, off, SamplingGrid{}, mask);
    CHECK(oracle::rel_err(fast, slow) < 1e-12);
  }
}

TEST_CASE("ddc handles huge finite offsets by sampling the zero padding") {
  auto x = Tensor<double>::randn({1, 2, 3, 3, 3}, 910);
  auto w = Tensor<double>::randn({2, 27}, 911);
  auto off = Tensor<double>::full({1, 81, 3, 3, 3}, 1e30);
  DepthwiseDeformWeights<double> wts{w, Tensor<double>()};
  auto y = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, PlaneMask{});
  CHECK(voldeform::max_abs(y) == 0.0);
  auto yn = voldeform::ddc_forward_naive(x, wts, off, SamplingGrid{}, PlaneMask{});
  CHECK(voldeform::max_abs(yn) == 0.0);
}

TEST_CASE("ddc rejects malformed and non finite offsets") {
  auto x = Tensor<double>::randn({1, 2, 3, 3, 3}, 920);
  auto w = Tensor<double>::randn({2, 27}, 921);
  DepthwiseDeformWeights<double> wts{w, Tensor<double>()};
  auto bad_shape = Tensor<double>::zeros({1, 80, 3, 3, 3});
  CHECK_THROWS_AS(
      voldeform::ddc_forward(x, wts, bad_shape, SamplingGrid{}, PlaneMask{}),
      voldeform::ShapeError);
  auto bad_val = Tensor<double>::zeros({1, 81, 3, 3, 3});
  bad_val[5] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(
      voldeform::ddc_forward(x, wts, bad_val, SamplingGrid{}, PlaneMask{}),
      voldeform::NumericError);
  CHECK_THROWS_AS(voldeform::ddc_forward(x, wts, bad_val, SamplingGrid{},
                                         PlaneMask{false, false, false}),
                  voldeform::ShapeError);
}

TEST_CASE("ddc with zero offsets degenerates to depthwise convolution") {
  auto x = Tensor<double>::randn({2, 4, 5, 4, 6}, 930);
  auto w = Tensor<double>::randn({4, 27}, 931);
  auto b = Tensor<double>::randn({4}, 932);
  DepthwiseDeformWeights<double> wts{w, b};
  auto off = voldeform::zero_offsets(x, SamplingGrid{});
  auto y = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, PlaneMask{});

  // same weights laid out as a grouped conv kernel; tap order is depth major
  // in both places
  auto wconv = Tensor<double>::from_data({4, 1, 3, 3, 3}, w.storage());
  auto want = voldeform::conv3d(x, wconv, &b, voldeform::Conv3dSpec{1, 1, 4});
  CHECK(oracle::rel_err(y, want) < 1e-12);
}

TEST_CASE("masked offset axes are ignored and get zero gradients") {
  auto x = Tensor<double>::randn({1, 2, 4, 4, 4}, 940);
  auto w = Tensor<double>::randn({2, 27}, 941);
  DepthwiseDeformWeights<double> wts{w, Tensor<double>()};
  auto off = Tensor<double>::randn({1, 81, 4, 4, 4}, 942);
  const PlaneMask hw{true, true, false};

  // forward: equal to hand zeroing the depth channels under the full mask
  auto zeroed = off;
  for (int64_t k = 0; k < 27; ++k) {
    for (int64_t v = 0; v < 64; ++v) zeroed[(54 + k) * 64 + v] = 0.0;
  }
  auto y1 = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, hw);
  auto y2 = voldeform::ddc_forward(x, wts, zeroed, SamplingGrid{}, PlaneMask{});
  CHECK(voldeform::max_abs_diff(y1, y2) == 0.0);

  auto gy = Tensor<double>::randn(y1.shape(), 943);
  auto g = voldeform::ddc_backward(gy, x, wts, off, SamplingGrid{}, hw);
  double depth_mag = 0;
  for (int64_t k = 0; k < 27; ++k) {
    for (int64_t v = 0; v < 64; ++v) {
      depth_mag = std::max(depth_mag, std::abs(g.offsets[(54 + k) * 64 + v]));
    }
  }
  CHECK(depth_mag == 0.0);
  CHECK(voldeform::max_abs(g.offsets) > 0.0);
}

TEST_CASE("ddc backward matches central differences") {
  const SamplingGrid grid;
  const PlaneMask mask;
  auto x = Tensor<double>::randn({1, 2, 4, 3, 4}, 950);
  auto w = Tensor<double>::randn({2, 27}, 951);
  auto b = Tensor<double>::randn({2}, 952);
  auto off = safe_offsets<double>({1, 81, 4, 3, 4}, 953);
  auto r = Tensor<double>::randn(x.shape(), 954);

  DepthwiseDeformWeights<double> wts{w, b};
  auto g = voldeform::ddc_backward(r, x, wts, off, grid, mask);

  auto loss = [&] {
    DepthwiseDeformWeights<double> cur{w, b};
    return voldeform::dot(voldeform::ddc_forward(x, cur, off, grid, mask), r);
  };
  // the output is linear in x, weight and bias, so central differences on
  // them are exact up to roundoff
  CHECK(oracle::rel_err(g.x, voldeform::finite_difference_grad(x, loss, 1e-5)) <
        1e-8);
  CHECK(oracle::rel_err(g.weight,
                        voldeform::finite_difference_grad(w, loss, 1e-5)) <
        1e-8);
  CHECK(oracle::rel_err(g.bias,
                        voldeform::finite_difference_grad(b, loss, 1e-5)) <
        1e-8);

  std::vector<int64_t> coords;
  for (int64_t i = 7; i < off.numel(); i += 73) coords.push_back(i);
  auto fd = voldeform::finite_difference_grad_at(off, loss, 1e-5, coords);
  std::vector<double> an;
  for (int64_t i : coords) an.push_back(g.offsets[i]);
  CHECK(voldeform::compare_grads(an, fd).rel() < 1e-7);
}

TEST_CASE("ddc gradient needs suppress unrequested outputs") {
  auto x = Tensor<double>::randn({1, 2, 3, 3, 3}, 960);
  auto w = Tensor<double>::randn({2, 27}, 961);
  DepthwiseDeformWeights<double> wts{w, Tensor<double>()};
  auto off = Tensor<double>::randn({1, 81, 3, 3, 3}, 962, 0.3);
  auto gy = Tensor<double>::randn(x.shape(), 963);

  auto g = voldeform::ddc_backward(gy, x, wts, off, SamplingGrid{}, PlaneMask{},
                                   voldeform::DeformGradNeeds{false, true, false});
  CHECK_FALSE(g.x.defined());
  CHECK(g.weight.defined());
  CHECK_FALSE(g.offsets.defined());

  auto full = voldeform::ddc_backward(gy, x, wts, off, SamplingGrid{},
                                      PlaneMask{});
  CHECK(voldeform::max_abs_diff(g.weight, full.weight) == 0.0);
}

TEST_CASE("ddc results do not depend on the thread count") {
  auto x = Tensor<double>::randn({1, 3, 5, 4, 4}, 970);
  auto w = Tensor<double>::randn({3, 27}, 971);
  auto b = Tensor<double>::randn({3}, 972);
  auto off = Tensor<double>::randn({1, 81, 5, 4, 4}, 973);
  auto gy = Tensor<double>::randn(x.shape(), 974);
  DepthwiseDeformWeights<double> wts{w, b};

  const int old = omp_get_max_threads();
  omp_set_num_threads(1);
  auto y1 = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, PlaneMask{});
  auto g1 = voldeform::ddc_backward(gy, x, wts, off, SamplingGrid{}, PlaneMask{});
  omp_set_num_threads(3);
  auto y3 = voldeform::ddc_forward(x, wts, off, SamplingGrid{}, PlaneMask{});
  auto g3 = voldeform::ddc_backward(gy, x, wts, off, SamplingGrid{}, PlaneMask{});
  omp_set_num_threads(old);

  CHECK(voldeform::max_abs_diff(y1, y3) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.x, g3.x) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.weight, g3.weight) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.offsets, g3.offsets) == 0.0);
}

TEST_CASE("standard deform matches its serial reference") {
  uint64_t seed = 1000;
  for (int64_t groups : {1, 2}) {
    auto x = Tensor<double>::randn({1, 4, 4, 4, 3}, seed++);
    auto w = Tensor<double>::randn({6, 4 / groups, 27}, seed++);
    auto b = Tensor<double>::randn({6}, seed++);
    auto off = Tensor<double>::randn({1, 81, 4, 4, 3}, seed++);
    StandardDeformWeights<double> wts{w, b, groups};
    auto fast =
        voldeform::standard_deform_forward(x, wts, off, SamplingGrid{}, PlaneMask{});
    auto slow = voldeform::standard_deform_forward_naive(x, wts, off,
                                                         SamplingGrid{}, PlaneMask{});
    CHECK(oracle::rel_err(fast, slow) < 1e-12);
  }
}

TEST_CASE("standard deform with zero offsets degenerates to conv3d") {
  auto x = Tensor<double>::randn({1, 4, 4, 5, 4}, 1010);
  auto w = Tensor<double>::randn({6, 2, 27}, 1011);
  auto b = Tensor<double>::randn({6}, 1012);
  StandardDeformWeights<double> wts{w, b, 2};
  auto off = voldeform::zero_offsets(x, SamplingGrid{});
  auto y = voldeform::standard_deform_forward(x, wts, off, SamplingGrid{},
                                              PlaneMask{});
  auto wconv = Tensor<double>::from_data({6, 2, 3, 3, 3}, w.storage());
  auto want = voldeform::conv3d(x, wconv, &b, voldeform::Conv3dSpec{1, 1, 2});
  CHECK(oracle::rel_err(y, want) < 1e-12);
}

TEST_CASE("standard deform backward matches central differences") {
  const SamplingGrid grid;
  const PlaneMask mask;
  auto x = Tensor<double>::randn({1, 2, 3, 4, 3}, 1020);
  auto w = Tensor<double>::randn({4, 1, 27}, 1021);
  auto b = Tensor<double>::randn({4}, 1022);
  auto off = safe_offsets<double>({1, 81, 3, 4, 3}, 1023);
  StandardDeformWeights<double> wts{w, b, 2};
  auto y = voldeform::standard_deform_forward(x, wts, off, grid, mask);
  auto r = Tensor<double>::randn(y.shape(), 1024);

  auto g = voldeform::standard_deform_backward(r, x, wts, off, grid, mask);
  auto loss = [&] {
    StandardDeformWeights<double> cur{w, b, 2};
    return voldeform::dot(
        voldeform::standard_deform_forward(x, cur, off, grid, mask), r);
  };
  CHECK(oracle::rel_err(g.x, voldeform::finite_difference_grad(x, loss, 1e-5)) <
        1e-8);
  CHECK(oracle::rel_err(g.weight,
                        voldeform::finite_difference_grad(w, loss, 1e-5)) <
        1e-8);
  CHECK(oracle::rel_err(g.bias,
                        voldeform::finite_difference_grad(b, loss, 1e-5)) <
        1e-8);

  std::vector<int64_t> coords;
  for (int64_t i = 3; i < off.numel(); i += 61) coords.push_back(i);
  auto fd = voldeform::finite_difference_grad_at(off, loss, 1e-5, coords);
  std::vector<double> an;
  for (int64_t i : coords) an.push_back(g.offsets[i]);
  CHECK(voldeform::compare_grads(an, fd).rel() < 1e-7);
}

TEST_CASE("standard deform results do not depend on the thread count") {
  auto x = Tensor<double>::randn({1, 4, 4, 3, 4}, 1030);
  auto w = Tensor<double>::randn({4, 2, 27}, 1031);
  auto off = Tensor<double>::randn({1, 81, 4, 3, 4}, 1032);
  StandardDeformWeights<double> wts{w, Tensor<double>(), 2};
  auto y = voldeform::standard_deform_forward(x, wts, off, SamplingGrid{},
                                              PlaneMask{});
  auto gy = Tensor<double>::randn(y.shape(), 1033);

  const int old = omp_get_max_threads();
  omp_set_num_threads(1);
  auto y1 = voldeform::standard_deform_forward(x, wts, off, SamplingGrid{},
                                               PlaneMask{});
  auto g1 = voldeform::standard_deform_backward(gy, x, wts, off, SamplingGrid{},
                                                PlaneMask{});
  omp_set_num_threads(3);
  auto y3 = voldeform::standard_deform_forward(x, wts, off, SamplingGrid{},
                                               PlaneMask{});
  auto g3 = voldeform::standard_deform_backward(gy, x, wts, off, SamplingGrid{},
                                                PlaneMask{});
  omp_set_num_threads(old);

  CHECK(voldeform::max_abs_diff(y1, y3) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.x, g3.x) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.weight, g3.weight) == 0.0);
  CHECK(voldeform::max_abs_diff(g1.offsets, g3.offsets) == 0.0);
}

TEST_CASE("single precision deform stays close to the double path") {
  auto xd = Tensor<double>::randn({1, 2, 4, 4, 4}, 1040);
  auto wd = Tensor<double>::randn({2, 27}, 1041);
  auto offd = Tensor<double>::randn({1, 81, 4, 4, 4}, 1042, 0.7);
  DepthwiseDeformWeights<double> wtsd{wd, Tensor<double>()};
  auto yd = voldeform::ddc_forward(xd, wtsd, offd, SamplingGrid{}, PlaneMask{});

  auto xf = voldeform::cast<float>(xd);
  auto wf = voldeform::cast<float>(wd);
  auto offf = voldeform::cast<float>(offd);
  DepthwiseDeformWeights<float> wtsf{wf, Tensor<float>()};
  auto yf = voldeform::ddc_forward(xf, wtsf, offf, SamplingGrid{}, PlaneMask{});
  CHECK(oracle::rel_err(voldeform::cast<double>(yf), yd) < 1e-4);
}
