#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "voldeform/deform.hpp"
#include "voldeform/ops.hpp"
#include "voldeform/tensor.hpp"

// Define-by-run reverse-mode tape. Each op records a node holding its value,
// its parents and a closure that pushes the node's cotangent into the parent
// grads. backward() visits reachable nodes in descending creation order, so
// every grad is accumulated in one fixed sequence regardless of graph shape.
// That keeps training bit-reproducible.

namespace voldeform {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // undefined until backward reaches this node
  bool requires_grad = false;
  bool leaf = false;
  int64_t seq = 0;
  std::string name;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;
};

namespace detail {

inline int64_t next_node_seq() {
  static std::atomic<int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

template <class T>
void accumulate_grad(Node<T>& n, const Tensor<T>& g) {
  if (!n.grad.defined()) {
    n.grad = Tensor<T>(n.value.shape());
  }
  add_inplace(n.grad, g);
}

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad,
                  std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->leaf = true;
    n->seq = detail::next_node_seq();
    n->name = std::move(name);
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value, std::string name = {}) {
    return leaf(std::move(value), false, std::move(name));
  }

  bool defined() const { return node_ != nullptr; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  // Materializes zeros on first access if backward never touched this node,
  // so an unused parameter reads as zero gradient rather than an error.
  const Tensor<T>& grad() const {
    if (!node_->grad.defined()) {
      node_->grad = Tensor<T>(node_->value.shape());
    }
    return node_->grad;
  }
  bool has_grad() const { return node_ && node_->grad.defined(); }
  void clear_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  // Reverse pass from a scalar. Grads of every reachable node are reset
  // first, so each call reports the gradient of this loss alone.
  void backward() const {
    if (!node_) throw ShapeError("backward: undefined variable");
    if (node_->value.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_string(node_->value.shape()));
    }
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<const Node<T>*> seen;
    std::vector<Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) {
          stack.push_back(p.get());
        }
      }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    for (Node<T>* n : order) n->grad = Tensor<T>();
    node_->grad = Tensor<T>::full({1}, T(1));
    for (Node<T>* n : order) {
      if (n->backprop && n->grad.defined()) n->backprop(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Op wrappers. Kernel calls are fully qualified; the wrappers shadow the
// kernel names inside this namespace.
namespace ag {

namespace detail {

template <class T>
Var<T> make_op(Tensor<T> value,
               std::initializer_list<std::shared_ptr<Node<T>>> parents,
               const char* name) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->seq = voldeform::detail::next_node_seq();
  n->name = name;
  for (const auto& p : parents) {
    if (p) {
      n->requires_grad = n->requires_grad || p->requires_grad;
      n->parents.push_back(p);
    }
  }
  return Var<T>(std::move(n));
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Var<T> out = detail::make_op(voldeform::add(a.value(), b.value()),
                               {a.node(), b.node()}, "add");
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    out.node()->backprop = [an, bn](Node<T>& self) {
      if (an->requires_grad) accumulate_grad(*an, self.grad);
      if (bn->requires_grad) accumulate_grad(*bn, self.grad);
    };
  }
  return out;
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Var<T> out =
      detail::make_op(voldeform::scale(a.value(), s), {a.node()}, "scale");
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backprop = [an, s](Node<T>& self) {
      accumulate_grad(*an, voldeform::scale(self.grad, s));
    };
  }
  return out;
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Var<T> out = detail::make_op(
      Tensor<T>::full({1}, voldeform::sum(a.value())), {a.node()}, "sum_all");
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backprop = [an](Node<T>& self) {
      accumulate_grad(*an, Tensor<T>::full(an->value.shape(), self.grad[0]));
    };
  }
  return out;
}

// <a, r> with a fixed tensor; the workhorse reduction for gradient checks
template <class T>
Var<T> dot_constant(const Var<T>& a, const Tensor<T>& r) {
  check_same_shape(a.value(), r, "dot_constant");
  Var<T> out = detail::make_op(
      Tensor<T>::full({1}, voldeform::dot(a.value(), r)), {a.node()},
      "dot_constant");
  if (out.requires_grad()) {
    auto an = a.node();
    out.node()->backprop = [an, r](Node<T>& self) {
      accumulate_grad(*an, voldeform::scale(r, self.grad[0]));
    };
  }
  return out;
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  Var<T> out = detail::make_op(voldeform::concat_channels(a.value(), b.value()),
                               {a.node(), b.node()}, "concat_channels");
  if (out.requires_grad()) {
    auto an = a.node();
    auto bn = b.node();
    const int64_t ca = a.value().extent(1);
    const int64_t cb = b.value().extent(1);
    out.node()->backprop = [an, bn, ca, cb](Node<T>& self) {
      if (an->requires_grad) {
        accumulate_grad(*an, voldeform::slice_channels(self.grad, 0, ca));
      }
      if (bn->requires_grad) {
        accumulate_grad(*bn, voldeform::slice_channels(self.grad, ca, ca + cb));
      }
    };
  }
  return out;
}

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
              const Conv3dSpec& spec = {}) {
  const Tensor<T>* bias = b.defined() ? &b.value() : nullptr;
  Var<T> out =
      detail::make_op(voldeform::conv3d(x.value(), w.value(), bias, spec),
                      {x.node(), w.node(), b.node()}, "conv3d");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    out.node()->backprop = [xn, wn, bn, spec](Node<T>& self) {
      if (xn->requires_grad) {
        accumulate_grad(*xn, voldeform::conv3d_backward_input(
                                 self.grad, wn->value, spec,
                                 xn->value.shape()));
      }
      if (wn->requires_grad) {
        accumulate_grad(*wn, voldeform::conv3d_backward_weight(
                                 self.grad, xn->value, spec,
                                 wn->value.shape()));
      }
      if (bn && bn->requires_grad) {
        accumulate_grad(*bn, voldeform::conv3d_backward_bias(self.grad));
      }
    };
  }
  return out;
}

template <class T>
Var<T> transposed_conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                         int64_t stride) {
  const Tensor<T>* bias = b.defined() ? &b.value() : nullptr;
  Var<T> out = detail::make_op(
      voldeform::transposed_conv3d(x.value(), w.value(), bias, stride),
      {x.node(), w.node(), b.node()}, "transposed_conv3d");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    out.node()->backprop = [xn, wn, bn, stride](Node<T>& self) {
      if (xn->requires_grad) {
        accumulate_grad(*xn, voldeform::transposed_conv3d_backward_input(
                                 self.grad, wn->value, stride,
                                 xn->value.shape()));
      }
      if (wn->requires_grad) {
        accumulate_grad(*wn, voldeform::transposed_conv3d_backward_weight(
                                 self.grad, xn->value, stride,
                                 wn->value.shape()));
      }
      if (bn && bn->requires_grad) {
        accumulate_grad(*bn, voldeform::conv3d_backward_bias(self.grad));
      }
    };
  }
  return out;
}

template <class T>
Var<T> pointwise_linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>* bias = b.defined() ? &b.value() : nullptr;
  Var<T> out = detail::make_op(
      voldeform::pointwise_linear(x.value(), w.value(), bias),
      {x.node(), w.node(), b.node()}, "pointwise_linear");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    out.node()->backprop = [xn, wn, bn](Node<T>& self) {
      if (xn->requires_grad) {
        accumulate_grad(*xn, voldeform::pointwise_linear_backward_input(
                                 self.grad, wn->value, xn->value.shape()));
      }
      if (wn->requires_grad) {
        accumulate_grad(*wn, voldeform::pointwise_linear_backward_weight(
                                 self.grad, xn->value));
      }
      if (bn && bn->requires_grad) {
        accumulate_grad(*bn, voldeform::pointwise_linear_backward_bias(self.grad));
      }
    };
  }
  return out;
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps) {
  Var<T> out = detail::make_op(
      voldeform::layer_norm_channels(x.value(), gamma.value(), beta.value(),
                                     eps),
      {x.node(), gamma.node(), beta.node()}, "layer_norm");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    out.node()->backprop = [xn, gn, bn, eps](Node<T>& self) {
      auto g = voldeform::layer_norm_channels_backward(self.grad, xn->value,
                                                       gn->value, eps);
      if (xn->requires_grad) accumulate_grad(*xn, g.x);
      if (gn->requires_grad) accumulate_grad(*gn, g.gamma);
      if (bn->requires_grad) accumulate_grad(*bn, g.beta);
    };
  }
  return out;
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  Var<T> out =
      detail::make_op(voldeform::gelu(x.value()), {x.node()}, "gelu");
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn](Node<T>& self) {
      accumulate_grad(*xn, voldeform::gelu_backward(self.grad, xn->value));
    };
  }
  return out;
}

template <class T>
Var<T> softmax_channels(const Var<T>& x) {
  Var<T> out = detail::make_op(voldeform::softmax_channels(x.value()),
                               {x.node()}, "softmax_channels");
  if (out.requires_grad()) {
    auto xn = x.node();
    out.node()->backprop = [xn](Node<T>& self) {
      accumulate_grad(
          *xn, voldeform::softmax_channels_backward(self.grad, self.value));
    };
  }
  return out;
}

// Gradient passes are skipped for whichever of x / weight / offsets does not
// require grad, which is what makes the frozen-offset and frozen-input
// configurations cheap.
template <class T>
Var<T> ddc(const Var<T>& x, const Var<T>& w, const Var<T>& b,
           const Var<T>& offsets, const SamplingGrid& grid,
           const PlaneMask& mask) {
  DepthwiseDeformWeights<T> wts{w.value(),
                                b.defined() ? b.value() : Tensor<T>()};
  Var<T> out = detail::make_op(
      ddc_forward(x.value(), wts, offsets.value(), grid, mask),
      {x.node(), w.node(), b.node(), offsets.node()}, "ddc");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto on = offsets.node();
    out.node()->backprop = [xn, wn, bn, on, grid, mask](Node<T>& self) {
      const DeformGradNeeds needs{xn->requires_grad, wn->requires_grad,
                                  on->requires_grad};
      const bool bias_needed = bn && bn->requires_grad;
      if (!needs.x && !needs.weight && !needs.offsets && !bias_needed) return;
      DepthwiseDeformWeights<T> wts{wn->value,
                                    bn ? bn->value : Tensor<T>()};
      auto g = ddc_backward(self.grad, xn->value, wts, on->value, grid, mask,
                            needs);
      if (needs.x) accumulate_grad(*xn, g.x);
      if (needs.weight) accumulate_grad(*wn, g.weight);
      if (needs.offsets) accumulate_grad(*on, g.offsets);
      if (bias_needed) accumulate_grad(*bn, g.bias);
    };
  }
  return out;
}

template <class T>
Var<T> standard_deform(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                       const Var<T>& offsets, const SamplingGrid& grid,
                       const PlaneMask& mask, int64_t groups = 1) {
  StandardDeformWeights<T> wts{w.value(),
                               b.defined() ? b.value() : Tensor<T>(), groups};
  Var<T> out = detail::make_op(
      standard_deform_forward(x.value(), wts, offsets.value(), grid, mask),
      {x.node(), w.node(), b.node(), offsets.node()}, "standard_deform");
  if (out.requires_grad()) {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto on = offsets.node();
    out.node()->backprop = [xn, wn, bn, on, grid, mask, groups](Node<T>& self) {
      const DeformGradNeeds needs{xn->requires_grad, wn->requires_grad,
                                  on->requires_grad};
      const bool bias_needed = bn && bn->requires_grad;
      if (!needs.x && !needs.weight && !needs.offsets && !bias_needed) return;
      StandardDeformWeights<T> wts{wn->value, bn ? bn->value : Tensor<T>(),
                                   groups};
      auto g = standard_deform_backward(self.grad, xn->value, wts, on->value,
                                        grid, mask, needs);
      if (needs.x) accumulate_grad(*xn, g.x);
      if (needs.weight) accumulate_grad(*wn, g.weight);
      if (needs.offsets) accumulate_grad(*on, g.offsets);
      if (bias_needed) accumulate_grad(*bn, g.bias);
    };
  }
  return out;
}

// Soft Dice loss on softmax probabilities. Per foreground class the overlap
// sums run over the whole batch, then the class scores are averaged; the
// background channel never enters the loss.
template <class T>
Var<T> dice_loss(const Var<T>& logits, const Tensor<T>& target_onehot,
                 T eps = static_cast<T>(1e-5)) {
  check_same_shape(logits.value(), target_onehot, "dice_loss");
  const int64_t C = logits.value().extent(1);
  if (C < 2) throw ShapeError("dice_loss: need at least 2 classes");
  const int64_t N = logits.value().extent(0);
  const int64_t V = logits.value().extent(2) * logits.value().extent(3) *
                    logits.value().extent(4);

  Tensor<T> p = voldeform::softmax_channels(logits.value());
  const T* pd = p.data();
  const T* td = target_onehot.data();

  std::vector<T> numer(static_cast<size_t>(C), 0);
  std::vector<T> denom(static_cast<size_t>(C), 0);
  for (int64_t c = 1; c < C; ++c) {
    T inter = 0, psum = 0, tsum = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* pc = pd + (n * C + c) * V;
      const T* tc = td + (n * C + c) * V;
      for (int64_t v = 0; v < V; ++v) {
        inter += pc[v] * tc[v];
        psum += pc[v];
        tsum += tc[v];
      }
    }
    numer[static_cast<size_t>(c)] = 2 * inter + eps;
    denom[static_cast<size_t>(c)] = psum + tsum + eps;
  }
  T dice_sum = 0;
  for (int64_t c = 1; c < C; ++c) {
    dice_sum += numer[static_cast<size_t>(c)] / denom[static_cast<size_t>(c)];
  }
  const T fg = static_cast<T>(C - 1);
  const T loss = 1 - dice_sum / fg;

  Var<T> out = detail::make_op(Tensor<T>::full({1}, loss), {logits.node()},
                               "dice_loss");
  if (out.requires_grad()) {
    auto xn = logits.node();
    out.node()->backprop = [xn, p = std::move(p), target = target_onehot,
                            numer = std::move(numer), denom = std::move(denom),
                            fg](Node<T>& self) {
      const int64_t N = p.extent(0), C = p.extent(1);
      const int64_t V = p.extent(2) * p.extent(3) * p.extent(4);
      const T g0 = self.grad[0];
      Tensor<T> gp(p.shape());
      const T* td = target.data();
      T* gpd = gp.data();
      for (int64_t c = 1; c < C; ++c) {
        const T nu = numer[static_cast<size_t>(c)];
        const T de = denom[static_cast<size_t>(c)];
        const T inv2 = 1 / (de * de);
        for (int64_t n = 0; n < N; ++n) {
          const T* tc = td + (n * C + c) * V;
          T* gc = gpd + (n * C + c) * V;
          for (int64_t v = 0; v < V; ++v) {
            gc[v] = -g0 / fg * (2 * tc[v] * de - nu) * inv2;
          }
        }
      }
      accumulate_grad(*xn, voldeform::softmax_channels_backward(gp, p));
    };
  }
  return out;
}

// Mean cross entropy with the softmax folded in, computed from logits with
// the usual max-shifted log-sum-exp.
template <class T>
Var<T> cross_entropy_loss(const Var<T>& logits, const Tensor<int32_t>& labels) {
  const Tensor<T>& x = logits.value();
  voldeform::detail::check_rank5(x.shape(), "cross_entropy_loss");
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
  if (labels.rank() != 4 || labels.extent(0) != N ||
      labels.extent(1) != x.extent(2) || labels.extent(2) != x.extent(3) ||
      labels.extent(3) != x.extent(4)) {
    throw ShapeError("cross_entropy_loss: labels must be (N, D, H, W)");
  }

  const T* xd = x.data();
  const int32_t* ld = labels.data();
  double total = 0;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t v = 0; v < V; ++v) {
      const T* xv = xd + n * C * V + v;
      const int32_t lab = ld[n * V + v];
      if (lab < 0 || lab >= C) {
        throw ShapeError("cross_entropy_loss: label " + std::to_string(lab) +
                         " out of range for " + std::to_string(C) +
                         " classes");
      }
      T m = xv[0];
      for (int64_t c = 1; c < C; ++c) m = std::max(m, xv[c * V]);
      T se = 0;
      for (int64_t c = 0; c < C; ++c) se += std::exp(xv[c * V] - m);
      total += static_cast<double>(m + std::log(se) - xv[lab * V]);
    }
  }
  const T loss = static_cast<T>(total / static_cast<double>(N * V));

  Var<T> out = detail::make_op(Tensor<T>::full({1}, loss), {logits.node()},
                               "cross_entropy_loss");
  if (out.requires_grad()) {
    auto xn = logits.node();
    out.node()->backprop = [xn, labels](Node<T>& self) {
      const Tensor<T>& x = xn->value;
      const int64_t N = x.extent(0), C = x.extent(1);
      const int64_t V = x.extent(2) * x.extent(3) * x.extent(4);
      Tensor<T> gx = voldeform::softmax_channels(x);
      T* gd = gx.data();
      const int32_t* ld = labels.data();
      const T s = self.grad[0] / static_cast<T>(N * V);
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t v = 0; v < V; ++v) {
          T* gv = gd + n * C * V + v;
          gv[ld[n * V + v] * V] -= 1;
          for (int64_t c = 0; c < C; ++c) gv[c * V] *= s;
        }
      }
      accumulate_grad(*xn, gx);
    };
  }
  return out;
}

}  // namespace ag

// Central-difference gradients for checking the analytic backward. eval()
// must rebuild the forward pass from the (mutated) parameter tensor and
// return the scalar loss.
template <class T, class F>
Tensor<double> finite_difference_grad(Tensor<T>& param, F&& eval, double h) {
  Tensor<double> g(param.shape());
  for (int64_t i = 0; i < param.numel(); ++i) {
    const T orig = param[i];
    param[i] = static_cast<T>(orig + h);
    const double fp = static_cast<double>(eval());
    param[i] = static_cast<T>(orig - h);
    const double fm = static_cast<double>(eval());
    param[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

template <class T, class F>
std::vector<double> finite_difference_grad_at(Tensor<T>& param, F&& eval,
                                              double h,
                                              const std::vector<int64_t>& coords) {
  std::vector<double> g;
  g.reserve(coords.size());
  for (int64_t i : coords) {
    const T orig = param[i];
    param[i] = static_cast<T>(orig + h);
    const double fp = static_cast<double>(eval());
    param[i] = static_cast<T>(orig - h);
    const double fm = static_cast<double>(eval());
    param[i] = orig;
    g.push_back((fp - fm) / (2 * h));
  }
  return g;
}

// Max per-coordinate gap normalized by the largest gradient magnitude in the
// compared set, which keeps near-zero coordinates from blowing up the ratio.
struct GradCheckStats {
  double max_abs_diff = 0;
  double scale = 0;
  int64_t worst = -1;

  double rel() const {
    if (max_abs_diff == 0) return 0;
    return max_abs_diff / std::max(scale, 1e-12);
  }
};

inline GradCheckStats compare_grads(const std::vector<double>& analytic,
                                    const std::vector<double>& numeric) {
  GradCheckStats s;
  for (size_t i = 0; i < analytic.size(); ++i) {
    s.scale = std::max({s.scale, std::abs(analytic[i]), std::abs(numeric[i])});
    const double d = std::abs(analytic[i] - numeric[i]);
    if (d > s.max_abs_diff) {
      s.max_abs_diff = d;
      s.worst = static_cast<int64_t>(i);
    }
  }
  return s;
}

}  // namespace voldeform
