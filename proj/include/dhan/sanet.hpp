#pragma once

// Soft-attention block: a trunk branch of residual units and a mask branch
// (down/up-sampling hourglass ending in a sigmoid) combined as (1 + M) * T,
// followed by global pooling and the location fusion layer.

#include <stdexcept>
#include <string>
#include <vector>

#include "dhan/layers.hpp"

namespace dhan {

// A = T + M * T, elementwise.
template <class T>
Tensor<T> apply_attention(const Tensor<T>& mask, const Tensor<T>& trunk) {
  if (mask.shape() != trunk.shape()) throw_shape_mismatch("apply_attention", mask.shape(), trunk.shape());
  std::vector<T> out(trunk.numel());
  auto m = mask.data(), t = trunk.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i] + m[i] * t[i];
  return detail::make_result<T>("apply_attention", trunk.shape(), std::move(out), {mask, trunk}, [](detail::Node<T>& self) {
    const T* m = detail::value_of(self, 0);
    const T* t = detail::value_of(self, 1);
    if (T* gm = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gm[i] += self.grad[i] * t[i];
    }
    if (T* gt = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gt[i] += self.grad[i] * (T(1) + m[i]);
    }
  });
}

struct SANetConfig {
  std::size_t in_channels = 3;
  std::size_t channels = 64;
  std::size_t trunk_depth = 2;
  std::size_t mask_depth = 1;  // residual units at each hourglass stage
  bool enabled = true;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
};

namespace nn {

// x + conv(prelu(bn(conv(prelu(bn(x)))))), 3x3 convolutions with padding 1.
template <class T>
struct ResidualUnit {
  BatchNorm<T> bn1, bn2;
  PReLU<T> act1, act2;
  Conv2d<T> conv1, conv2;
  std::size_t channels = 0;

  ResidualUnit() = default;
  ResidualUnit(std::size_t channels_, const SANetConfig& cfg, Rng& rng)
      : bn1(channels_, cfg.bn_momentum, cfg.bn_eps),
        bn2(channels_, cfg.bn_momentum, cfg.bn_eps),
        act1(channels_),
        act2(channels_),
        conv1(channels_, channels_, 3, 1, 1, rng),
        conv2(channels_, channels_, 3, 1, 1, rng),
        channels(channels_) {}

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != channels) {
      throw ShapeError("residual_unit: expected " + std::to_string(channels) + " channels, got input " + shape_str(x.shape()));
    }
    auto y = conv1(act1(bn1(x, mode)));
    y = conv2(act2(bn2(y, mode)));
    return add(x, y);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    bn1.collect(prefix + ".bn1", out);
    act1.collect(prefix + ".act1", out);
    conv1.collect(prefix + ".conv1", out);
    bn2.collect(prefix + ".bn2", out);
    act2.collect(prefix + ".act2", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

}  // namespace nn

template <class T>
struct AttentionBundle {
  Tensor<T> mask;       // undefined when attention is disabled
  Tensor<T> trunk;
  Tensor<T> attention;
  Tensor<T> pooled;     // (N, channels)
};

template <class T>
class SANet {
 public:
  SANet() = default;
  SANet(const SANetConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    if (cfg.channels == 0 || cfg.in_channels == 0) throw std::invalid_argument("sa_net: channel counts must be positive");
    stem_conv_ = nn::Conv2d<T>(cfg.in_channels, cfg.channels, 1, 1, 0, rng);
    stem_bn_ = nn::BatchNorm<T>(cfg.channels, cfg.bn_momentum, cfg.bn_eps);
    stem_act_ = nn::PReLU<T>(cfg.channels);
    auto units = [&](std::size_t n) {
      std::vector<nn::ResidualUnit<T>> v;
      for (std::size_t i = 0; i < n; ++i) v.emplace_back(cfg.channels, cfg, rng);
      return v;
    };
    trunk_ = units(cfg.trunk_depth);
    if (cfg.enabled) {
      down1_ = units(cfg.mask_depth);
      down2_ = units(cfg.mask_depth);
      up1_ = units(cfg.mask_depth);
      mask_conv1_ = nn::Conv2d<T>(cfg.channels, cfg.channels, 1, 1, 0, rng);
      mask_conv2_ = nn::Conv2d<T>(cfg.channels, cfg.channels, 1, 1, 0, rng);
    }
  }

  const SANetConfig& config() const { return cfg_; }

  // Two stride-2 poolings followed by two x2 upsamplings return to the input
  // resolution only when it is a multiple of 4.
  static void check_extent(std::size_t extent) {
    if (extent < 4 || extent % 4 != 0) {
      throw std::invalid_argument("sa_net: glimpse extent " + std::to_string(extent) +
                                  " must be a positive multiple of 4 for the mask hourglass");
    }
  }

  AttentionBundle<T> operator()(const Tensor<T>& x, Mode mode) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
      throw ShapeError("sa_net: expected (N, " + std::to_string(cfg_.in_channels) + ", g, g) input, got " + shape_str(x.shape()));
    }
    if (cfg_.enabled) {
      check_extent(x.dim(2));
      check_extent(x.dim(3));
    }
    auto stem = stem_act_(stem_bn_(stem_conv_(x), mode));
    AttentionBundle<T> out;
    out.trunk = run(trunk_, stem, mode);
    if (cfg_.enabled) {
      auto m = nn::max_pool2d(stem, 3, 2, 1);
      m = run(down1_, m, mode);
      m = nn::max_pool2d(m, 3, 2, 1);
      m = run(down2_, m, mode);
      m = nn::bilinear_upsample(m, 2);
      m = run(up1_, m, mode);
      m = nn::bilinear_upsample(m, 2);
      out.mask = nn::sigmoid(mask_conv2_(mask_conv1_(m)));
      out.attention = apply_attention(out.mask, out.trunk);
    } else {
      out.attention = out.trunk;
    }
    out.pooled = nn::global_avg_pool(out.attention);
    return out;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    stem_conv_.collect(prefix + ".stem.conv", out);
    stem_bn_.collect(prefix + ".stem.bn", out);
    stem_act_.collect(prefix + ".stem.act", out);
    collect_units(prefix + ".trunk", trunk_, out);
    if (cfg_.enabled) {
      collect_units(prefix + ".mask.down1", down1_, out);
      collect_units(prefix + ".mask.down2", down2_, out);
      collect_units(prefix + ".mask.up1", up1_, out);
      mask_conv1_.collect(prefix + ".mask.conv1", out);
      mask_conv2_.collect(prefix + ".mask.conv2", out);
    }
  }

  std::vector<nn::ResidualUnit<T>>& trunk_units() { return trunk_; }

 private:
  static Tensor<T> run(std::vector<nn::ResidualUnit<T>>& units, Tensor<T> x, Mode mode) {
    for (auto& u : units) x = u(x, mode);
    return x;
  }
  static void collect_units(const std::string& prefix, const std::vector<nn::ResidualUnit<T>>& units, ParamList<T>& out) {
    for (std::size_t i = 0; i < units.size(); ++i) units[i].collect(prefix + "." + std::to_string(i), out);
  }

  SANetConfig cfg_;
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm<T> stem_bn_;
  nn::PReLU<T> stem_act_;
  std::vector<nn::ResidualUnit<T>> trunk_, down1_, down2_, up1_;
  nn::Conv2d<T> mask_conv1_, mask_conv2_;
};

// g = relu(W [f_s, l] + b).
template <class T>
struct FusionLayer {
  nn::Dense<T> dense;
  std::size_t feature_width = 0;

  FusionLayer() = default;
  FusionLayer(std::size_t feature_width_, std::size_t out_width, nn::Rng& rng)
      : dense(feature_width_ + 2, out_width, rng), feature_width(feature_width_) {}

  Tensor<T> operator()(const Tensor<T>& pooled, const Tensor<T>& location) const {
    if (pooled.rank() != 2 || pooled.dim(1) != feature_width || location.rank() != 2 || location.dim(1) != 2 ||
        location.dim(0) != pooled.dim(0)) {
      throw ShapeError("fuse_features: expected features (N, " + std::to_string(feature_width) + ") and locations (N, 2), got " +
                       shape_str(pooled.shape()) + " and " + shape_str(location.shape()));
    }
    return nn::relu(dense(concat<T>({pooled, location}, 1)));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const { dense.collect(prefix, out); }
};

}  // namespace dhan
