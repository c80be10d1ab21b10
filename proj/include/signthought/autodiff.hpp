#pragma once

// Reverse-mode differentiation over dense 64-bit tensors.
//
// A Var is a shared handle to a graph node. Ops build nodes eagerly; nodes whose
// inputs do not require gradients keep no parents, so inference builds no graph.
// Every op checks its output for NaN/Inf and throws NumericError naming the op.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "signthought/tensor.hpp"

namespace signthought {

class Var;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(const Node& self, const Tensor& grad, std::span<Tensor* const> parent_grads)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

Var make_result(const char* op, Tensor value, std::vector<Var> parents, BackwardFn backward);

}  // namespace detail

// While alive, ops on this thread record no graph (inference and decoding).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  // Leaf that receives gradients.
  static Var leaf(Tensor value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }

  // Only meaningful on leaves; used by optimizers and finite-difference probes.
  Tensor& mutable_value() { return node_->value; }

  const detail::Node* node() const noexcept { return node_.get(); }

 private:
  explicit Var(detail::NodePtr node) : node_(std::move(node)) {}
  friend Var detail::make_result(const char*, Tensor, std::vector<Var>, detail::BackwardFn);

  detail::NodePtr node_;
};

// ---- elementwise (numpy-style broadcasting) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

// ---- shape ----
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& order);
Var transpose(const Var& a);  // swaps the last two axes
Var expand(const Var& a, const Shape& shape);
Var slice(const Var& a, int axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, int axis);
Var detach(const Var& a);

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_axis(const Var& a, int axis);  // keeps the reduced axis with size 1

// ---- linear algebra ----
// a[..., m, k] x b[..., k, n]; batch axes broadcast.
Var matmul(const Var& a, const Var& b);

// ---- normalization ----
// additive_mask broadcasts to logits; entries equal to -inf are excluded and
// come out exactly 0. A row with no surviving entry is an error.
Var masked_softmax(const Var& logits, const Tensor& additive_mask);
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// ---- lookup / conv / regularization ----
// Rows of table[V, d] gathered by ids; result shape is out_prefix + [d].
Var embedding(const Var& table, std::span<const std::int32_t> ids, const Shape& out_prefix);
// x[B, T, C], kernel[k, C] (k odd), bias[C]; zero padding at both edges.
Var depthwise_conv1d(const Var& x, const Var& kernel, const Var& bias);
// Inverted dropout; identity when !training or p == 0.
Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training);

// Named learnable tensors with stable insertion order.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Var var;
  };

  const Var& add(const std::string& name, Tensor init);
  const Var& operator[](std::string_view name) const;
  Var& at(std::string_view name);
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t total_numel() const;
  std::vector<Entry>::const_iterator begin() const { return entries_.begin(); }
  std::vector<Entry>::const_iterator end() const { return entries_.end(); }
  std::vector<Entry>::iterator begin() { return entries_.begin(); }
  std::vector<Entry>::iterator end() { return entries_.end(); }

  // Deep copy: the clone shares no nodes with this store.
  ParameterStore clone() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradientMap = std::map<std::string, Tensor>;

// d(loss)/d(theta) for every parameter in store; parameters off the graph get zeros.
GradientMap backward(const Var& loss, const ParameterStore& store);

}  // namespace signthought
