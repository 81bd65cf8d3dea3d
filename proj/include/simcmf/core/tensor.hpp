#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simcmf/core/error.hpp"

namespace simcmf {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool meta = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  std::int64_t numel() const { return shape_numel(shape); }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), 0.0);
    return grad;
  }
};

inline std::uint64_t next_seq() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Reference-counted handle to a dense row-major float64 array that may take
// part in reverse-mode differentiation. Copies share storage; use clone() for
// a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    validate(shape);
    auto node = std::make_shared<detail::Node>();
    node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    validate(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    return Tensor(std::move(node));
  }

  // Shape-only tensor without storage, used for exact parameter accounting of
  // models too large to materialize.
  static Tensor meta(Shape shape, bool requires_grad = false) {
    validate(shape);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->meta = true;
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += ndim();
    return node_->shape.at(static_cast<std::size_t>(i));
  }
  std::int64_t numel() const { return node_->numel(); }
  bool is_meta() const { return node_->meta; }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; bypasses the graph. Intended for initialization,
  // loading and optimizer updates of leaf tensors.
  std::span<double> mutable_data() const { return node_->data; }
  const double* ptr() const { return node_->data.data(); }
  double at(std::int64_t i) const { return node_->data.at(static_cast<std::size_t>(i)); }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  const Tensor& set_requires_grad(bool value) const {
    node_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() const { return node_->grad_buffer(); }
  void zero_grad() const { node_->grad.clear(); }

  // New leaf holding a copy of the values.
  Tensor clone() const {
    if (is_meta()) return meta(shape(), false);
    return from(shape(), node_->data, false);
  }
  Tensor detach() const { return clone(); }

  // Runs reverse-mode accumulation from this tensor. The seed gradient is
  // `seed` for every element.
  void backward(double seed = 1.0) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  static void validate(const Shape& shape) {
    for (auto d : shape) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Creates an op result. Records the inputs and backward closure only when
// gradient mode is on and some input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->seq = next_seq();
  bool needs = false;
  if (grad_mode()) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) node->inputs.push_back(in->handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result(Shape shape, std::vector<double> values,
                          const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->seq = next_seq();
  bool needs = false;
  if (grad_mode()) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->inputs.push_back(in.handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

inline void Tensor::backward(double seed) const {
  if (!requires_grad()) throw Error("backward() on a tensor that does not require grad");
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  // Inputs are always created before their consumers, so descending creation
  // order is a valid reverse topological order.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  auto& g = node_->grad_buffer();
  for (auto& v : g) v += seed;
  for (detail::Node* n : order) {
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace simcmf
