#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "voldeform/autograd.hpp"
#include "voldeform/blocks.hpp"
#include "voldeform/deform.hpp"
#include "voldeform/errors.hpp"
#include "voldeform/rng.hpp"

// Encoder-decoder segmentation network. The encoder is a stem followed by
// stages of residual blocks (norm, spatial operator, residual; norm, scaling
// branch, residual) with strided downsamples between stages and a wider
// bottleneck. The decoder mirrors it with transposed convolutions, skip
// concatenation and two-conv residual blocks, then a final upsample back to
// input resolution and a pointwise class head.

namespace voldeform {

// Named trainable leaves. Registration order is creation order and is part
// of the checkpoint contract; names are the unit of compatibility.
template <class T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) {
      throw ConfigError("duplicate parameter name " + name);
    }
    auto v = Var<T>::leaf(std::move(init), true, name);
    index_.emplace(name, params_.size());
    params_.push_back(v);
    return v;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ConfigError("unknown parameter name " + name);
    }
    return params_[it->second];
  }

  const std::vector<Var<T>>& all() const { return params_; }
  std::vector<Var<T>>& all() { return params_; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value().numel();
    return n;
  }

 private:
  std::vector<Var<T>> params_;
  std::unordered_map<std::string, size_t> index_;
};

struct NetworkConfig {
  int64_t in_channels = 1;
  int64_t num_classes = 2;
  std::vector<int64_t> stage_channels{48, 96, 192, 384};
  int64_t blocks_per_stage = 2;
  int64_t stem_kernel = 7;
  int64_t hidden_channels = 768;
  BlockSettings block{};
  double ln_eps = 1e-6;
  uint64_t seed = 0;

  int64_t stages() const { return static_cast<int64_t>(stage_channels.size()); }

  // stem halves the input once, every stage transition halves it again and
  // the bottleneck downsample halves it once more
  int64_t resolution_divisor() const { return int64_t(1) << (stages() + 1); }

  void validate() const {
    block.validate();
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (stage_channels.empty()) throw ConfigError("no stage channels given");
    for (int64_t c : stage_channels) {
      if (c < 1) throw ConfigError("stage channels must be positive");
    }
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be positive");
    if (stem_kernel < 1 || stem_kernel % 2 == 0) {
      throw ConfigError("stem kernel must be odd");
    }
    if (hidden_channels < 1) throw ConfigError("hidden_channels must be positive");
  }
};

template <class T>
class Network {
 public:
  explicit Network(NetworkConfig config) : cfg_(std::move(config)) {
    cfg_.validate();
    build();
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int64_t param_count() const { return params_.total_elements(); }

  // logits at input resolution, (N, num_classes, D, H, W)
  Var<T> forward(const Var<T>& input) {
    const Tensor<T>& xv = input.value();
    if (xv.rank() != 5 || xv.extent(1) != cfg_.in_channels) {
      throw ShapeError("network forward: expected (N, " +
                       std::to_string(cfg_.in_channels) + ", D, H, W), got " +
                       shape_string(xv.shape()));
    }
    const int64_t div = cfg_.resolution_divisor();
    for (int axis : {2, 3, 4}) {
      if (xv.extent(axis) % div != 0) {
        throw ShapeError("network forward: spatial extents must be divisible by " +
                         std::to_string(div) + ", got " +
                         shape_string(xv.shape()));
      }
    }

    const T eps = static_cast<T>(cfg_.ln_eps);
    auto h = ag::conv3d(input, p("stem.conv.weight"), p("stem.conv.bias"),
                        Conv3dSpec{2, (cfg_.stem_kernel - 1) / 2, 1});
    h = ag::layer_norm(h, p("stem.norm.gamma"), p("stem.norm.beta"), eps);

    const int64_t S = cfg_.stages();
    std::vector<Var<T>> skips;
    skips.reserve(static_cast<size_t>(S));
    for (int64_t s = 0; s < S; ++s) {
      for (int64_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        h = block_forward(stage_prefix(s, b), h);
      }
      skips.push_back(h);
      if (s + 1 < S) {
        const std::string d = "down" + std::to_string(s) + ".";
        h = ag::layer_norm(h, p(d + "norm.gamma"), p(d + "norm.beta"), eps);
        h = ag::conv3d(h, p(d + "conv.weight"), p(d + "conv.bias"),
                       Conv3dSpec{2, 0, 1});
      }
    }

    h = ag::layer_norm(h, p("bottleneck.down.norm.gamma"),
                       p("bottleneck.down.norm.beta"), eps);
    h = ag::conv3d(h, p("bottleneck.down.conv.weight"),
                   p("bottleneck.down.conv.bias"), Conv3dSpec{2, 0, 1});
    h = res_block_forward("bottleneck.res.", h);

    for (int64_t s = S - 1; s >= 0; --s) {
      const std::string u = "up" + std::to_string(s) + ".";
      h = ag::transposed_conv3d(h, p(u + "weight"), p(u + "bias"), 2);
      h = ag::concat_channels(skips[static_cast<size_t>(s)], h);
      h = res_block_forward("dec" + std::to_string(s) + ".", h);
    }

    h = ag::transposed_conv3d(h, p("final.up.weight"), p("final.up.bias"), 2);
    return ag::pointwise_linear(h, p("head.weight"), p("head.bias"));
  }

  // forward without retaining gradients, for evaluation and inference
  Tensor<T> infer(const Tensor<T>& x) {
    return forward(Var<T>::constant(x)).value();
  }

  // one encoder block under the given parameter prefix, e.g. "stage0.block1."
  Var<T> block_forward(const std::string& prefix, const Var<T>& x) {
    const T eps = static_cast<T>(cfg_.ln_eps);
    auto h = ag::layer_norm(x, p(prefix + "norm1.gamma"),
                            p(prefix + "norm1.beta"), eps);

    Var<T> off;
    if (cfg_.block.has_offset_branch()) {
      if (cfg_.block.offset_kernel == 1) {
        off = ag::pointwise_linear(h, p(prefix + "offset.weight"),
                                   p(prefix + "offset.bias"));
      } else {
        off = ag::conv3d(h, p(prefix + "offset.weight"),
                         p(prefix + "offset.bias"), Conv3dSpec{1, 1, 1});
      }
    } else {
      off = Var<T>::constant(zero_offsets(h.value(), grid_));
    }

    Var<T> y;
    if (cfg_.block.op == BlockOperator::kStandardDeform) {
      y = ag::standard_deform(h, p(prefix + "op.weight"), p(prefix + "op.bias"),
                              off, grid_, cfg_.block.plane_mask, 1);
    } else {
      y = ag::ddc(h, p(prefix + "op.weight"), p(prefix + "op.bias"), off,
                  grid_, cfg_.block.plane_mask);
    }
    auto z = ag::add(x, y);

    if (cfg_.block.scaling == ScalingKind::kNone) return z;
    auto h2 = ag::layer_norm(z, p(prefix + "norm2.gamma"),
                             p(prefix + "norm2.beta"), eps);
    Var<T> m;
    if (cfg_.block.scaling == ScalingKind::kMlp) {
      m = ag::pointwise_linear(h2, p(prefix + "mlp.fc1.weight"),
                               p(prefix + "mlp.fc1.bias"));
      m = ag::gelu(m);
      m = ag::pointwise_linear(m, p(prefix + "mlp.fc2.weight"),
                               p(prefix + "mlp.fc2.bias"));
    } else {
      const int64_t c = h2.value().extent(1);
      m = ag::conv3d(h2, p(prefix + "scale.dw.weight"),
                     p(prefix + "scale.dw.bias"), Conv3dSpec{1, 1, c});
      m = ag::gelu(m);
      m = ag::pointwise_linear(m, p(prefix + "scale.pw.weight"),
                               p(prefix + "scale.pw.bias"));
    }
    return ag::add(z, m);
  }

  // analytic flop count of one forward pass at the given input shape:
  // 2 flops per multiply-accumulate, and per deformable tap 15 flops of
  // interpolation arithmetic on top of its 8-corner gathers
  double flops_estimate(int64_t depth, int64_t height, int64_t width) const {
    const double K = static_cast<double>(grid_.taps());
    const int64_t S = cfg_.stages();
    double total = 0;
    double vox = voxels(depth / 2, height / 2, width / 2);

    const double k3 = cube(cfg_.stem_kernel);
    total += 2.0 * vox * static_cast<double>(cfg_.stage_channels[0]) *
             static_cast<double>(cfg_.in_channels) * k3;

    for (int64_t s = 0; s < S; ++s) {
      const double C = static_cast<double>(cfg_.stage_channels[static_cast<size_t>(s)]);
      for (int64_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        if (cfg_.block.has_offset_branch()) {
          const double ok3 = cube(cfg_.block.offset_kernel);
          total += 2.0 * vox * 3.0 * K * C * ok3;  // offset prediction
        }
        const double tap_cost = 15.0 + 2.0;  // interpolate plus accumulate
        if (cfg_.block.op == BlockOperator::kStandardDeform) {
          total += vox * C * (2.0 * C * K) + vox * K * 15.0;
        } else {
          total += vox * C * K * tap_cost;
        }
        if (cfg_.block.scaling == ScalingKind::kMlp) {
          const double R = static_cast<double>(cfg_.block.mlp_ratio);
          total += 2.0 * vox * 2.0 * R * C * C;
        } else if (cfg_.block.scaling == ScalingKind::kDepthwiseConv) {
          total += 2.0 * vox * C * 27.0 + 2.0 * vox * C * C;
        }
      }
      if (s + 1 < S) {
        const double Cn = static_cast<double>(cfg_.stage_channels[static_cast<size_t>(s + 1)]);
        total += 2.0 * (vox / 8.0) * Cn * C * 8.0;
        vox /= 8.0;
      }
    }

    const double Ch = static_cast<double>(cfg_.hidden_channels);
    const double Cl = static_cast<double>(cfg_.stage_channels.back());
    total += 2.0 * (vox / 8.0) * Ch * Cl * 8.0;
    vox /= 8.0;
    total += 2.0 * vox * Ch * Ch * 27.0 * 2.0;  // bottleneck residual convs

    double Cprev = Ch;
    for (int64_t s = S - 1; s >= 0; --s) {
      const double Cs = static_cast<double>(cfg_.stage_channels[static_cast<size_t>(s)]);
      total += 2.0 * vox * 8.0 * Cs * Cprev;  // transposed conv, stride 2
      vox *= 8.0;
      total += 2.0 * vox * Cs * (2.0 * Cs) * 27.0;  // dec conv1
      total += 2.0 * vox * Cs * Cs * 27.0;          // dec conv2
      total += 2.0 * vox * Cs * (2.0 * Cs);         // skip projection
      Cprev = Cs;
    }

    const double C0 = static_cast<double>(cfg_.stage_channels[0]);
    total += 2.0 * vox * 8.0 * C0 * C0;
    vox *= 8.0;
    total += 2.0 * vox * static_cast<double>(cfg_.num_classes) * C0;
    return total;
  }

 private:
  static double cube(int64_t k) {
    return static_cast<double>(k) * static_cast<double>(k) *
           static_cast<double>(k);
  }
  static double voxels(int64_t d, int64_t h, int64_t w) {
    return static_cast<double>(d) * static_cast<double>(h) *
           static_cast<double>(w);
  }

  std::string stage_prefix(int64_t s, int64_t b) const {
    return "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
  }

  Var<T>& p(const std::string& name) { return params_.get(name); }

  // He-style normal fan-in init keyed by the parameter name, so any two
  // models agree on every parameter they share by name
  Tensor<T> he_init(const std::string& name, std::vector<int64_t> shape,
                    int64_t fan_in) {
    const uint64_t seed = hash_string(name) ^ cfg_.seed;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    return Tensor<T>::randn(std::move(shape), seed, stddev);
  }

  void create_norm(const std::string& prefix, int64_t c) {
    params_.create(prefix + "gamma", Tensor<T>::full({c}, T(1)));
    params_.create(prefix + "beta", Tensor<T>::zeros({c}));
  }

  void create_conv(const std::string& prefix, int64_t cout, int64_t cg,
                   int64_t k) {
    params_.create(prefix + "weight",
                   he_init(prefix + "weight", {cout, cg, k, k, k}, cg * k * k * k));
    params_.create(prefix + "bias", Tensor<T>::zeros({cout}));
  }

  void create_res_block(const std::string& prefix, int64_t cin, int64_t cout) {
    create_conv(prefix + "conv1.", cout, cin, 3);
    create_norm(prefix + "norm1.", cout);
    create_conv(prefix + "conv2.", cout, cout, 3);
    create_norm(prefix + "norm2.", cout);
    if (cin != cout) {
      params_.create(prefix + "skip.weight",
                     he_init(prefix + "skip.weight", {cout, cin}, cin));
      params_.create(prefix + "skip.bias", Tensor<T>::zeros({cout}));
      create_norm(prefix + "skipnorm.", cout);
    }
  }

  void create_block(const std::string& prefix, int64_t c) {
    const int64_t K = grid_.taps();
    create_norm(prefix + "norm1.", c);
    switch (cfg_.block.op) {
      case BlockOperator::kDdc:
      case BlockOperator::kPlainDepthwise:
        params_.create(prefix + "op.weight",
                       he_init(prefix + "op.weight", {c, K}, K));
        break;
      case BlockOperator::kStandardDeform:
        params_.create(prefix + "op.weight",
                       he_init(prefix + "op.weight", {c, c, K}, c * K));
        break;
    }
    params_.create(prefix + "op.bias", Tensor<T>::zeros({c}));
    if (cfg_.block.has_offset_branch()) {
      // zero offset branch start: the first forward is exactly undeformed
      if (cfg_.block.offset_kernel == 1) {
        params_.create(prefix + "offset.weight", Tensor<T>::zeros({3 * K, c}));
      } else {
        params_.create(prefix + "offset.weight",
                       Tensor<T>::zeros({3 * K, c, 3, 3, 3}));
      }
      params_.create(prefix + "offset.bias", Tensor<T>::zeros({3 * K}));
    }
    if (cfg_.block.scaling != ScalingKind::kNone) {
      create_norm(prefix + "norm2.", c);
    }
    if (cfg_.block.scaling == ScalingKind::kMlp) {
      const int64_t hidden = cfg_.block.mlp_ratio * c;
      params_.create(prefix + "mlp.fc1.weight",
                     he_init(prefix + "mlp.fc1.weight", {hidden, c}, c));
      params_.create(prefix + "mlp.fc1.bias", Tensor<T>::zeros({hidden}));
      params_.create(prefix + "mlp.fc2.weight",
                     he_init(prefix + "mlp.fc2.weight", {c, hidden}, hidden));
      params_.create(prefix + "mlp.fc2.bias", Tensor<T>::zeros({c}));
    } else if (cfg_.block.scaling == ScalingKind::kDepthwiseConv) {
      params_.create(prefix + "scale.dw.weight",
                     he_init(prefix + "scale.dw.weight", {c, 1, 3, 3, 3}, 27));
      params_.create(prefix + "scale.dw.bias", Tensor<T>::zeros({c}));
      params_.create(prefix + "scale.pw.weight",
                     he_init(prefix + "scale.pw.weight", {c, c}, c));
      params_.create(prefix + "scale.pw.bias", Tensor<T>::zeros({c}));
    }
  }

  void build() {
    const int64_t S = cfg_.stages();
    const int64_t C0 = cfg_.stage_channels[0];
    create_conv("stem.conv.", C0, cfg_.in_channels, cfg_.stem_kernel);
    create_norm("stem.norm.", C0);

    for (int64_t s = 0; s < S; ++s) {
      const int64_t c = cfg_.stage_channels[static_cast<size_t>(s)];
      for (int64_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        create_block(stage_prefix(s, b), c);
      }
      if (s + 1 < S) {
        const std::string d = "down" + std::to_string(s) + ".";
        create_norm(d + "norm.", c);
        create_conv(d + "conv.", cfg_.stage_channels[static_cast<size_t>(s + 1)],
                    c, 2);
      }
    }

    const int64_t Cl = cfg_.stage_channels.back();
    const int64_t Ch = cfg_.hidden_channels;
    create_norm("bottleneck.down.norm.", Cl);
    create_conv("bottleneck.down.conv.", Ch, Cl, 2);
    create_res_block("bottleneck.res.", Ch, Ch);

    int64_t cprev = Ch;
    for (int64_t s = S - 1; s >= 0; --s) {
      const int64_t cs = cfg_.stage_channels[static_cast<size_t>(s)];
      const std::string u = "up" + std::to_string(s) + ".";
      params_.create(u + "weight",
                     he_init(u + "weight", {cprev, cs, 2, 2, 2}, cprev));
      params_.create(u + "bias", Tensor<T>::zeros({cs}));
      create_res_block("dec" + std::to_string(s) + ".", 2 * cs, cs);
      cprev = cs;
    }

    params_.create("final.up.weight",
                   he_init("final.up.weight", {C0, C0, 2, 2, 2}, C0));
    params_.create("final.up.bias", Tensor<T>::zeros({C0}));
    params_.create("head.weight",
                   he_init("head.weight", {cfg_.num_classes, C0}, C0));
    params_.create("head.bias", Tensor<T>::zeros({cfg_.num_classes}));
  }

  Var<T> block_forward(const std::string& prefix, const Var<T>& x) {
    const T eps = static_cast<T>(cfg_.ln_eps);
    auto h = ag::layer_norm(x, p(prefix + "norm1.gamma"),
                            p(prefix + "norm1.beta"), eps);

    Var<T> off;
    if (cfg_.block.has_offset_branch()) {
      if (cfg_.block.offset_kernel == 1) {
        off = ag::pointwise_linear(h, p(prefix + "offset.weight"),
                                   p(prefix + "offset.bias"));
      } else {
        off = ag::conv3d(h, p(prefix + "offset.weight"),
                         p(prefix + "offset.bias"), Conv3dSpec{1, 1, 1});
      }
    } else {
      off = Var<T>::constant(zero_offsets(h.value(), grid_));
    }

    Var<T> y;
    if (cfg_.block.op == BlockOperator::kStandardDeform) {
      y = ag::standard_deform(h, p(prefix + "op.weight"), p(prefix + "op.bias"),
                              off, grid_, cfg_.block.plane_mask, 1);
    } else {
      y = ag::ddc(h, p(prefix + "op.weight"), p(prefix + "op.bias"), off,
                  grid_, cfg_.block.plane_mask);
    }
    auto z = ag::add(x, y);

    if (cfg_.block.scaling == ScalingKind::kNone) return z;
    auto h2 = ag::layer_norm(z, p(prefix + "norm2.gamma"),
                             p(prefix + "norm2.beta"), eps);
    Var<T> m;
    if (cfg_.block.scaling == ScalingKind::kMlp) {
      m = ag::pointwise_linear(h2, p(prefix + "mlp.fc1.weight"),
                               p(prefix + "mlp.fc1.bias"));
      m = ag::gelu(m);
      m = ag::pointwise_linear(m, p(prefix + "mlp.fc2.weight"),
                               p(prefix + "mlp.fc2.bias"));
    } else {
      const int64_t c = h2.value().extent(1);
      m = ag::conv3d(h2, p(prefix + "scale.dw.weight"),
                     p(prefix + "scale.dw.bias"), Conv3dSpec{1, 1, c});
      m = ag::gelu(m);
      m = ag::pointwise_linear(m, p(prefix + "scale.pw.weight"),
                               p(prefix + "scale.pw.bias"));
    }
    return ag::add(z, m);
  }

  Var<T> res_block_forward(const std::string& prefix, const Var<T>& x) {
    const T eps = static_cast<T>(cfg_.ln_eps);
    auto h = ag::conv3d(x, p(prefix + "conv1.weight"), p(prefix + "conv1.bias"),
                        Conv3dSpec{1, 1, 1});
    h = ag::layer_norm(h, p(prefix + "norm1.gamma"), p(prefix + "norm1.beta"),
                       eps);
    h = ag::gelu(h);
    h = ag::conv3d(h, p(prefix + "conv2.weight"), p(prefix + "conv2.bias"),
                   Conv3dSpec{1, 1, 1});
    h = ag::layer_norm(h, p(prefix + "norm2.gamma"), p(prefix + "norm2.beta"),
                       eps);

    Var<T> skip = x;
    if (params_.has(prefix + "skip.weight")) {
      skip = ag::pointwise_linear(x, p(prefix + "skip.weight"),
                                  p(prefix + "skip.bias"));
      skip = ag::layer_norm(skip, p(prefix + "skipnorm.gamma"),
                            p(prefix + "skipnorm.beta"), eps);
    }
    return ag::gelu(ag::add(h, skip));
  }

  NetworkConfig cfg_;
  SamplingGrid grid_{};
  ParamStore<T> params_;
};

}  // namespace voldeform
