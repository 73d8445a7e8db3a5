#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "voldeform/autograd.hpp"

namespace ag = voldeform::ag;
using voldeform::Tensor;
using voldeform::Var;

TEST_CASE("leaf and constant flags") {
  auto p = Var<double>::leaf(Tensor<double>::randn({2, 2}, 1), true, "p");
  auto c = Var<double>::constant(Tensor<double>::randn({2, 2}, 2));
  CHECK(p.requires_grad());
  CHECK_FALSE(c.requires_grad());
  CHECK(p.name() == "p");
  CHECK_FALSE(Var<double>().defined());
}

TEST_CASE("backward requires a scalar") {
  auto p = Var<double>::leaf(Tensor<double>::randn({1, 2, 2, 2, 2}, 3), true);
  auto y = ag::gelu(p);
  CHECK_THROWS_AS(y.backward(), voldeform::ShapeError);
  CHECK_NOTHROW(ag::sum_all(y).backward());
}

TEST_CASE("sum and scale chain gradients") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 1, 2, 2, 2}, 4), true);
  auto loss = ag::scale(ag::sum_all(x), 3.0);
  loss.backward();
  for (int64_t i = 0; i < 8; ++i) CHECK(x.grad()[i] == 3.0);
}

TEST_CASE("a value used twice accumulates both paths") {
  auto x = Var<double>::leaf(Tensor<double>::full({1, 1, 1, 1, 2}, 1.0), true);
  auto loss = ag::sum_all(ag::add(x, x));
  loss.backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("backward twice reports the same gradient, not double") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 2, 2, 2}, 5), true);
  auto loss = ag::sum_all(ag::gelu(x));
  loss.backward();
  auto first = x.grad();
  loss.backward();
  CHECK(voldeform::max_abs_diff(first, x.grad()) == 0.0);
}

TEST_CASE("an unused parameter reads zero gradient") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 1, 1, 1, 2}, 6), true);
  auto unused = Var<double>::leaf(Tensor<double>::randn({3}, 7), true);
  ag::sum_all(x).backward();
  CHECK_FALSE(unused.has_grad());  // backward never reached it
  CHECK(voldeform::max_abs(unused.grad()) == 0.0);
  CHECK(unused.grad().same_shape(unused.value()));
}

TEST_CASE("constants stop gradient flow") {
  auto x = Var<double>::constant(Tensor<double>::randn({1, 1, 1, 1, 2}, 8));
  auto loss = ag::sum_all(ag::gelu(x));
  CHECK_FALSE(loss.requires_grad());
  loss.backward();  // silently does nothing
  CHECK_FALSE(x.has_grad());
}

namespace {

// finite differences against a graph rebuilt per evaluation
template <class Build>
void check_param_grad(Var<double>& param, Build&& build, double h,
                      double tol) {
  auto loss = build();
  loss.backward();
  auto analytic = param.grad();
  auto eval = [&] { return build().value()[0]; };
  auto fd = voldeform::finite_difference_grad(param.mutable_value(), eval, h);
  CHECK(oracle::rel_err(analytic, fd) < tol);
}

}  // namespace

TEST_CASE("conv3d op gradients match central differences") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 3, 3, 3}, 10), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({3, 2, 3, 3, 3}, 11), true);
  auto b = Var<double>::leaf(Tensor<double>::randn({3}, 12), true);
  auto r = Tensor<double>::randn({1, 3, 3, 3, 3}, 13);
  const voldeform::Conv3dSpec spec{1, 1, 1};

  auto build = [&] { return ag::dot_constant(ag::conv3d(x, w, b, spec), r); };
  check_param_grad(x, build, 1e-5, 1e-8);
  check_param_grad(w, build, 1e-5, 1e-8);
  check_param_grad(b, build, 1e-5, 1e-8);
}

TEST_CASE("layer_norm and gelu op gradients match central differences") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 3, 2, 2, 2}, 20), true);
  auto gamma = Var<double>::leaf(Tensor<double>::randn({3}, 21), true);
  auto beta = Var<double>::leaf(Tensor<double>::randn({3}, 22), true);

  auto build = [&] {
    return ag::sum_all(ag::gelu(ag::layer_norm(x, gamma, beta, 1e-5)));
  };
  check_param_grad(x, build, 1e-6, 1e-6);
  check_param_grad(gamma, build, 1e-6, 1e-7);
  check_param_grad(beta, build, 1e-6, 1e-7);
}

TEST_CASE("pointwise_linear and concat gradients match central differences") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 2, 2, 2}, 30), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({3, 4}, 31), true);
  auto b = Var<double>::leaf(Tensor<double>::randn({3}, 32), true);

  auto build = [&] {
    auto cat = ag::concat_channels(x, ag::gelu(x));
    return ag::sum_all(ag::gelu(ag::pointwise_linear(cat, w, b)));
  };
  check_param_grad(x, build, 1e-6, 1e-6);
  check_param_grad(w, build, 1e-6, 1e-7);
  check_param_grad(b, build, 1e-6, 1e-7);
}

TEST_CASE("transposed_conv3d op gradients match central differences") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 2, 2, 2}, 40), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({2, 3, 2, 2, 2}, 41), true);
  auto b = Var<double>::leaf(Tensor<double>::randn({3}, 42), true);

  auto build = [&] {
    return ag::sum_all(ag::gelu(ag::transposed_conv3d(x, w, b, 2)));
  };
  check_param_grad(x, build, 1e-5, 1e-7);
  check_param_grad(w, build, 1e-5, 1e-7);
  check_param_grad(b, build, 1e-5, 1e-7);
}

TEST_CASE("ddc op gradients flow to input, weight, bias and offsets") {
  const voldeform::SamplingGrid grid;
  voldeform::RngStream rng(50);
  Tensor<double> offv({1, 81, 3, 3, 3});
  for (int64_t i = 0; i < offv.numel(); ++i) {
    offv[i] = rng.next_uniform(0.1, 0.4);
  }
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 3, 3, 3}, 51), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({2, 27}, 52), true);
  auto b = Var<double>::leaf(Tensor<double>::randn({2}, 53), true);
  auto off = Var<double>::leaf(offv, true);

  auto build = [&] {
    return ag::sum_all(
        ag::gelu(ag::ddc(x, w, b, off, grid, voldeform::PlaneMask{})));
  };
  check_param_grad(x, build, 1e-5, 1e-7);
  check_param_grad(w, build, 1e-5, 1e-7);
  check_param_grad(b, build, 1e-5, 1e-7);
  check_param_grad(off, build, 1e-5, 1e-6);
}

TEST_CASE("ddc skips the offset gradient when offsets are constant") {
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 3, 3, 3}, 60), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({2, 27}, 61), true);
  auto off = Var<double>::constant(Tensor<double>::zeros({1, 81, 3, 3, 3}));

  auto loss = ag::sum_all(
      ag::ddc(x, w, Var<double>(), off, voldeform::SamplingGrid{},
              voldeform::PlaneMask{}));
  loss.backward();
  CHECK(x.has_grad());
  CHECK(w.has_grad());
  CHECK_FALSE(off.has_grad());
}

TEST_CASE("standard_deform op gradients match central differences") {
  const voldeform::SamplingGrid grid;
  voldeform::RngStream rng(70);
  Tensor<double> offv({1, 81, 3, 3, 3});
  for (int64_t i = 0; i < offv.numel(); ++i) {
    offv[i] = rng.next_uniform(0.1, 0.4);
  }
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 3, 3, 3}, 71), true);
  auto w = Var<double>::leaf(Tensor<double>::randn({3, 2, 27}, 72), true);
  auto off = Var<double>::leaf(offv, true);

  auto build = [&] {
    return ag::sum_all(ag::gelu(ag::standard_deform(
        x, w, Var<double>(), off, grid, voldeform::PlaneMask{}, 1)));
  };
  check_param_grad(x, build, 1e-5, 1e-7);
  check_param_grad(w, build, 1e-5, 1e-7);
  check_param_grad(off, build, 1e-5, 1e-6);
}

TEST_CASE("dice loss value on a uniform prediction") {
  // logits all zero gives p = 0.5 for both classes; one of two voxels is
  // foreground, so dice = (2*0.5 + eps) / (1 + 1 + eps)
  auto logits =
      Var<double>::leaf(Tensor<double>::zeros({1, 2, 1, 1, 2}), true);
  auto target = Tensor<double>::from_data({1, 2, 1, 1, 2}, {0, 1, 1, 0});
  const double eps = 1e-5;
  auto loss = ag::dice_loss(logits, target, eps);
  const double want = 1.0 - (2 * 0.5 + eps) / (2.0 + eps);
  CHECK(loss.value()[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("dice loss approaches zero on a confident correct prediction") {
  Tensor<double> logits_v({1, 2, 1, 1, 2});
  // voxel 0 is background, voxel 1 is foreground; logits strongly favor the
  // right class at both
  logits_v.at({0, 0, 0, 0, 0}) = 12.0;
  logits_v.at({0, 1, 0, 0, 0}) = -12.0;
  logits_v.at({0, 0, 0, 0, 1}) = -12.0;
  logits_v.at({0, 1, 0, 0, 1}) = 12.0;
  auto logits = Var<double>::leaf(logits_v, true);
  auto target = Tensor<double>::from_data({1, 2, 1, 1, 2}, {1, 0, 0, 1});
  auto loss = ag::dice_loss(logits, target);
  CHECK(loss.value()[0] < 1e-5);
  CHECK(loss.value()[0] >= 0.0);
}

TEST_CASE("dice loss gradient matches central differences") {
  auto logits =
      Var<double>::leaf(Tensor<double>::randn({1, 3, 2, 2, 2}, 80), true);
  Tensor<double> target({1, 3, 2, 2, 2});
  voldeform::RngStream rng(81);
  for (int64_t v = 0; v < 8; ++v) {
    const int64_t c = static_cast<int64_t>(rng.next_below(3));
    target[c * 8 + v] = 1.0;
  }
  auto build = [&] { return ag::dice_loss(logits, target); };
  check_param_grad(logits, build, 1e-6, 1e-7);
}

TEST_CASE("dice loss ignores the background channel gradient path") {
  // with every voxel background, foreground sums are all zero and the loss
  // sits at 1 - eps/(psum + eps); the gradient should still be finite
  auto logits =
      Var<double>::leaf(Tensor<double>::randn({1, 2, 1, 2, 2}, 82), true);
  Tensor<double> target({1, 2, 1, 2, 2});
  for (int64_t v = 0; v < 4; ++v) target[v] = 1.0;
  auto loss = ag::dice_loss(logits, target);
  loss.backward();
  CHECK(logits.grad().all_finite());
  CHECK(loss.value()[0] <= 1.0);
}

TEST_CASE("cross entropy frozen value and gradient") {
  auto logits = Var<double>::leaf(
      Tensor<double>::from_data({1, 2, 1, 1, 1}, {std::log(3.0), 0.0}), true);
  auto labels = Tensor<int32_t>::from_data({1, 1, 1, 1}, {1});
  auto loss = ag::cross_entropy_loss(logits, labels);
  // p = (0.75, 0.25), true class 1, so the loss is ln 4
  CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  loss.backward();
  CHECK(logits.grad()[0] == doctest::Approx(0.75).epsilon(1e-10));
  CHECK(logits.grad()[1] == doctest::Approx(-0.75).epsilon(1e-10));

  auto big = Var<double>::leaf(Tensor<double>::randn({2, 4, 2, 2, 2}, 90), true);
  Tensor<int32_t> lab({2, 2, 2, 2});
  voldeform::RngStream rng(91);
  for (int64_t i = 0; i < lab.numel(); ++i) {
    lab[i] = static_cast<int32_t>(rng.next_below(4));
  }
  auto build = [&] { return ag::cross_entropy_loss(big, lab); };
  check_param_grad(big, build, 1e-6, 1e-7);
}

TEST_CASE("cross entropy rejects out of range labels") {
  auto logits =
      Var<double>::leaf(Tensor<double>::randn({1, 2, 1, 1, 1}, 95), true);
  auto labels = Tensor<int32_t>::from_data({1, 1, 1, 1}, {2});
  CHECK_THROWS_AS(ag::cross_entropy_loss(logits, labels),
                  voldeform::ShapeError);
}

TEST_CASE("combined dice plus cross entropy backpropagates") {
  auto logits =
      Var<double>::leaf(Tensor<double>::randn({1, 2, 2, 2, 2}, 96), true);
  Tensor<double> onehot({1, 2, 2, 2, 2});
  Tensor<int32_t> labels({1, 2, 2, 2});
  voldeform::RngStream rng(97);
  for (int64_t v = 0; v < 8; ++v) {
    const int32_t c = static_cast<int32_t>(rng.next_below(2));
    labels[v] = c;
    onehot[c * 8 + v] = 1.0;
  }
  auto build = [&] {
    return ag::add(ag::dice_loss(logits, onehot),
                   ag::cross_entropy_loss(logits, labels));
  };
  check_param_grad(logits, build, 1e-6, 1e-7);
}

TEST_CASE("a residual stack of mixed ops gradchecks end to end") {
  // two block stack in miniature: ddc with offsets from a pointwise branch,
  // layer norm, gelu mlp, residual joins
  const voldeform::SamplingGrid grid;
  const voldeform::PlaneMask mask;
  auto x = Var<double>::leaf(Tensor<double>::randn({1, 2, 3, 3, 3}, 200), true);
  auto ow = Var<double>::leaf(Tensor<double>::randn({81, 2}, 201, 0.05), true);
  auto ob = Var<double>::leaf(Tensor<double>::zeros({81}), true);
  auto dw = Var<double>::leaf(Tensor<double>::randn({2, 27}, 202), true);
  auto db = Var<double>::leaf(Tensor<double>::randn({2}, 203), true);
  auto g1 = Var<double>::leaf(Tensor<double>::full({2}, 1.0), true);
  auto b1 = Var<double>::leaf(Tensor<double>::zeros({2}), true);
  auto mw = Var<double>::leaf(Tensor<double>::randn({2, 2}, 204), true);
  auto mb = Var<double>::leaf(Tensor<double>::randn({2}, 205), true);

  auto build = [&] {
    auto ln = ag::layer_norm(x, g1, b1, 1e-5);
    auto off = ag::pointwise_linear(ln, ow, ob);
    auto conv = ag::ddc(ln, dw, db, off, grid, mask);
    auto res = ag::add(x, conv);
    auto mlp = ag::pointwise_linear(ag::gelu(res), mw, mb);
    return ag::sum_all(ag::gelu(ag::add(res, mlp)));
  };
  check_param_grad(x, build, 1e-5, 1e-6);
  check_param_grad(ow, build, 1e-5, 1e-6);
  check_param_grad(dw, build, 1e-5, 1e-6);
  check_param_grad(g1, build, 1e-5, 1e-6);
  check_param_grad(mw, build, 1e-5, 1e-6);
}
