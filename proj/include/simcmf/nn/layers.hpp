#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "simcmf/core/ops.hpp"
#include "simcmf/nn/module.hpp"

namespace simcmf::nn {

// Low-rank update B·A added to a column range of a Linear's output.
class LowRankDelta : public Module {
 public:
  LowRankDelta(std::int64_t in_features, std::int64_t begin, std::int64_t end, std::int64_t rank,
               double scale, Init& init)
      : begin_(begin), end_(end), scale_(scale) {
    // A ~ U(+-1/sqrt(in)), B = 0 so the delta starts at exactly zero.
    a_ = register_parameter("A", init.uniform({rank, in_features}, 1.0 / std::sqrt(in_features)));
    b_ = register_parameter("B", init.zeros({end - begin, rank}));
  }

  Tensor apply(const Tensor& x, const Tensor& y) const {
    auto delta = ops::linear(ops::linear(x, a_), b_);
    if (scale_ != 1.0) delta = ops::scale(delta, scale_);
    return ops::add_columns(y, delta, begin_);
  }

  std::int64_t rank() const { return a_.dim(0); }
  const Tensor& down() const { return a_; }
  const Tensor& up() const { return b_; }

 private:
  std::int64_t begin_, end_;
  double scale_;
  Tensor a_, b_;
};

class Linear : public Module {
 public:
  Linear(std::int64_t in_features, std::int64_t out_features, bool bias, Init& init)
      : in_(in_features), out_(out_features) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    weight_ = register_parameter("weight", init.uniform({out_features, in_features}, bound));
    if (bias) bias_ = register_parameter("bias", init.uniform({out_features}, bound));
  }

  Tensor forward(const Tensor& x) const {
    auto y = ops::linear(x, weight_, bias_);
    for (const auto& d : deltas_) y = d->apply(x, y);
    return y;
  }

  LowRankDelta& attach_low_rank(const std::string& name, std::int64_t begin, std::int64_t end,
                                std::int64_t rank, double scale, Init& init) {
    deltas_.push_back(std::make_unique<LowRankDelta>(in_, begin, end, rank, scale, init));
    register_module(name, *deltas_.back());
    return *deltas_.back();
  }

  std::int64_t in_features() const { return in_; }
  std::int64_t out_features() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::int64_t in_, out_;
  Tensor weight_, bias_;
  std::vector<std::unique_ptr<LowRankDelta>> deltas_;
};

class LayerNorm : public Module {
 public:
  LayerNorm(std::int64_t dim, double eps, Init& init) : eps_(eps) {
    weight_ = register_parameter("weight", init.ones({dim}));
    bias_ = register_parameter("bias", init.zeros({dim}));
  }

  // Normalizes rows of a [N, dim] tensor.
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, weight_, bias_, eps_); }

  // Channel normalization of a [dim, H, W] feature map.
  Tensor forward_2d(const Tensor& x) const {
    const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto rows = ops::transpose2d(ops::reshape(x, {c, h * w}));
    auto normed = ops::transpose2d(forward(rows));
    return ops::reshape(normed, {c, h, w});
  }

 private:
  double eps_;
  Tensor weight_, bias_;
};

class Conv2d : public Module {
 public:
  Conv2d(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
         std::int64_t stride, std::int64_t pad, bool bias, Init& init)
      : stride_(stride), pad_(pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
    weight_ = register_parameter(
        "weight", init.uniform({out_channels, in_channels, kernel, kernel}, bound));
    if (bias) bias_ = register_parameter("bias", init.uniform({out_channels}, bound));
  }

  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  std::int64_t stride_, pad_;
  Tensor weight_, bias_;
};

class ConvTranspose2x2 : public Module {
 public:
  ConvTranspose2x2(std::int64_t in_channels, std::int64_t out_channels, Init& init) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(out_channels * 4));
    weight_ = register_parameter("weight", init.uniform({in_channels, out_channels, 2, 2}, bound));
    bias_ = register_parameter("bias", init.uniform({out_channels}, bound));
  }

  Tensor forward(const Tensor& x) const { return ops::conv_transpose2x2(x, weight_, bias_); }

 private:
  Tensor weight_, bias_;
};

// Stack of Linear layers with ReLU in between.
class Mlp : public Module {
 public:
  Mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, std::int64_t num_layers, Init& init) {
    for (std::int64_t i = 0; i < num_layers; ++i) {
      const auto fin = i == 0 ? in : hidden;
      const auto fout = i + 1 == num_layers ? out : hidden;
      layers_.push_back(std::make_unique<Linear>(fin, fout, true, init));
      register_module("layers." + std::to_string(i), *layers_.back());
    }
  }

  Tensor forward(Tensor x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i]->forward(x);
      if (i + 1 < layers_.size()) x = ops::relu(x);
    }
    return x;
  }

 private:
  std::vector<std::unique_ptr<Linear>> layers_;
};

enum class Activation { gelu, relu };

// Transformer feed-forward: Linear, activation, Linear.
class MlpBlock : public Module {
 public:
  MlpBlock(std::int64_t dim, std::int64_t hidden, Init& init, Activation act = Activation::gelu)
      : act_(act), lin1_(dim, hidden, true, init), lin2_(hidden, dim, true, init) {
    register_module("lin1", lin1_);
    register_module("lin2", lin2_);
  }

  Tensor forward(const Tensor& x) const {
    auto h = lin1_.forward(x);
    h = act_ == Activation::gelu ? ops::gelu(h) : ops::relu(h);
    return lin2_.forward(h);
  }

  std::int64_t hidden() const { return lin1_.out_features(); }

 private:
  Activation act_;
  Linear lin1_, lin2_;
};

}  // namespace simcmf::nn
