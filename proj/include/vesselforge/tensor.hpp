#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vesselforge/common.hpp"
#include "vesselforge/rng.hpp"

namespace vesselforge {

// ---------------------------------------------------------------------------
// Dense N-d tensor with a per-forward-pass autograd tape. Each operation
// returns a fresh node whose backward closure accumulates into its parents;
// the graph lives exactly as long as tensors referencing it. Leaves keep
// their grad buffers across passes until zero_grad() is called.
//
// The scalar type is a template parameter: float is the working precision,
// double ("wide-scalar") is used by the finite-difference test suites.
// ---------------------------------------------------------------------------

template <class T>
struct NodeT {
  std::vector<std::int64_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  std::function<void(NodeT<T>&)> backward;  // empty for leaves

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<NodeT<T>> n) : node_(std::move(n)) {}

  static TensorT zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(std::vector<std::int64_t> shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<T>>();
    n->value.assign(static_cast<std::size_t>(count(shape)), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(std::vector<std::int64_t> shape, std::vector<T> data,
                           bool requires_grad = false) {
    if (count(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError(detail::msg("tensor data length ", data.size(),
                                   " does not match shape product ", count(shape)));
    }
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  /// I.i.d. Normal(mean, stddev) entries drawn in flat index order.
  static TensorT randn(std::vector<std::int64_t> shape, Pcg32& rng, T mean = T(0),
                       T stddev = T(1), bool requires_grad = false) {
    std::vector<T> data(static_cast<std::size_t>(count(shape)));
    for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_ ? node_->numel() : 0; }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError(detail::msg("item() requires a scalar tensor, got numel=", numel()));
    }
    return node_->value[0];
  }

  /// Leaf view onto the same value buffer, cut off from the tape.
  TensorT detach() const {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = false;
    return TensorT(std::move(n));
  }

  void zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  // Element accessors for 4-d (N,C,H,W) tensors; test and glue code only.
  T at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) const {
    const auto& s = node_->shape;
    return node_->value[static_cast<std::size_t>(((n * s[1] + c) * s[2] + y) * s[3] + x)];
  }
  T& at4(std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    const auto& s = node_->shape;
    return node_->value[static_cast<std::size_t>(((n * s[1] + c) * s[2] + y) * s[3] + x)];
  }

  std::shared_ptr<NodeT<T>>& node() { return node_; }
  const std::shared_ptr<NodeT<T>>& node() const { return node_; }

  static std::int64_t count(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
      if (e <= 0) throw ShapeError(detail::msg("non-positive extent ", e, " in shape"));
      n *= e;
    }
    return n;
  }

 private:
  std::shared_ptr<NodeT<T>> node_;
};

using Tensor = TensorT<float>;

namespace detail {

// Builds an op result node. The backward closure receives the result node and
// must += into parents' grad buffers (after ensure_grad). Graph edges are
// recorded only when some input participates in differentiation.
template <class T>
TensorT<T> make_op(std::vector<std::int64_t> shape, std::vector<T> value,
                   std::initializer_list<TensorT<T>> inputs,
                   std::function<void(NodeT<T>&)> backward) {
  auto n = std::make_shared<NodeT<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || (in.defined() && in.requires_grad());
  n->requires_grad = rg;
  if (rg) {
    for (const auto& in : inputs) {
      if (in.defined()) n->parents.push_back(in.node());
    }
    n->backward = std::move(backward);
  }
  return TensorT<T>(std::move(n));
}

}  // namespace detail

// Reverse-mode pass from a scalar loss. Repeated calls accumulate into leaf
// grads; intermediates are fresh per tape so only leaves persist.
template <class T>
void backward(const TensorT<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError(detail::msg("backward() requires a scalar loss, got numel=",
                                 loss.defined() ? loss.numel() : 0));
  }
  NodeT<T>* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order topological sort.
  std::vector<NodeT<T>*> order;
  std::unordered_set<NodeT<T>*> visited;
  std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<T>* p = node->parents[idx++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Leaves keep accumulated grads across calls; interior nodes are reset so
  // each pass contributes exactly one d(loss)/d(leaf).
  for (NodeT<T>* node : order) {
    if (node->backward) node->grad.assign(node->value.size(), T(0));
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<T>* node = *it;
    if (node->backward) node->backward(*node);
  }
}

}  // namespace vesselforge
