#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "simcmf/core/random.hpp"
#include "simcmf/core/tensor.hpp"

namespace simcmf::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class InitMode {
  random,  // regular initialization
  zeros,   // every tensor zero; used when weights are loaded right after
  meta,    // shape-only tensors for parameter accounting
};

// Source of initial parameter values.
class Init {
 public:
  explicit Init(std::uint64_t seed, InitMode mode = InitMode::random) : rng_(seed), mode_(mode) {}

  bool meta() const { return mode_ == InitMode::meta; }
  InitMode mode() const { return mode_; }
  Rng& rng() { return rng_; }

  Tensor constant(Shape shape, double value) {
    if (meta()) return Tensor::meta(std::move(shape), true);
    return Tensor::full(std::move(shape), mode_ == InitMode::zeros ? 0.0 : value, true);
  }
  Tensor zeros(Shape shape) { return constant(std::move(shape), 0.0); }
  Tensor ones(Shape shape) { return constant(std::move(shape), 1.0); }

  Tensor uniform(Shape shape, double bound) {
    if (mode_ != InitMode::random) return constant(std::move(shape), 0.0);
    auto t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = rng_.uniform(-bound, bound);
    return t;
  }

  Tensor normal(Shape shape, double stddev) {
    if (mode_ != InitMode::random) return constant(std::move(shape), 0.0);
    auto t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = rng_.normal(0.0, stddev);
    return t;
  }

  // In-place re-initialization of an existing tensor; no-op for meta tensors.
  void fill_normal(const Tensor& t, double stddev) {
    if (t.is_meta() || mode_ != InitMode::random) return;
    for (auto& v : t.mutable_data()) v = rng_.normal(0.0, stddev);
  }
  void fill(const Tensor& t, double value) {
    if (t.is_meta()) return;
    for (auto& v : t.mutable_data()) v = value;
  }

 private:
  Rng rng_;
  InitMode mode_;
};

// Tree of named parameters and buffers. Children are registered by reference,
// so modules are neither copyable nor movable; own them through unique_ptr or
// as members of their parent.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = delete;
  Module& operator=(Module&&) = delete;
  virtual ~Module() = default;

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    collect(out, "", false);
    return out;
  }

  std::vector<NamedTensor> named_buffers() const {
    std::vector<NamedTensor> out;
    collect(out, "", true);
    return out;
  }

  // Parameters followed by buffers; the set persisted in checkpoints.
  std::vector<NamedTensor> state() const {
    auto out = named_parameters();
    auto bufs = named_buffers();
    out.insert(out.end(), bufs.begin(), bufs.end());
    return out;
  }

  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (auto& p : named_parameters())
      if (p.tensor.requires_grad()) out.push_back(p.tensor);
    return out;
  }

  void set_trainable(bool trainable) const {
    for (auto& p : named_parameters()) p.tensor.set_requires_grad(trainable);
  }

  void zero_grad() const {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }

 protected:
  Tensor register_parameter(std::string name, Tensor t) {
    params_.push_back({std::move(name), t});
    return t;
  }
  Tensor register_buffer(std::string name, Tensor t) {
    t.set_requires_grad(false);
    buffers_.push_back({std::move(name), t});
    return t;
  }
  void register_module(std::string name, Module& child) {
    children_.emplace_back(std::move(name), &child);
  }

 private:
  void collect(std::vector<NamedTensor>& out, const std::string& prefix, bool buffers) const {
    for (const auto& p : buffers ? buffers_ : params_) out.push_back({prefix + p.name, p.tensor});
    for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".", buffers);
  }

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

}  // namespace simcmf::nn
