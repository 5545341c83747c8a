#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "textsep/errors.hpp"

namespace textsep::diff {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// When disabled, ops skip taping entirely; used for validation passes and
// inference. Thread-local so worker threads can opt out independently.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

// Forward results are checked for NaN/Inf after every op unless switched off
// (the check is cheap and vectorizes; keep it on in training).
inline std::atomic<bool>& finite_checks() {
  static std::atomic<bool> on{true};
  return on;
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  if (!finite_checks().load(std::memory_order_relaxed)) return;
  for (const T& v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // lazily sized to values.size()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Invoked with *this once this node's grad is final; accumulates into
  // parents' grads. Captures parent pointers and cached forward data, never
  // the node itself (that would leak the tape).
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

// Value-semantic handle onto a tape node. Copies share the node.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->values.assign(static_cast<std::size_t>(numel(shape)), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.values()) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from(std::vector<T> data, Shape shape) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
      throw ShapeError("Tensor::from: data size does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->values = std::move(data);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }

  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }
  T* data() { return node_->values.data(); }
  const T* data() const { return node_->values.data(); }

  T item() const {
    if (node_->values.size() != 1) {
      throw ShapeError("item(): tensor has " + std::to_string(node_->values.size()) + " elements");
    }
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad_view() const { return node_->grad; }

  void zero_grad() { node_->grad.assign(node_->values.size(), T(0)); }

  // Reverse-mode sweep from a scalar. Topological order is rebuilt per call;
  // the graph is released when the caller drops the output tensor.
  void backward() {
    if (!defined()) throw ShapeError("backward() on undefined tensor");
    if (node_->values.size() != 1) {
      throw ShapeError("backward() requires a scalar, got shape " + shape_str(node_->shape));
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward) {
        for (auto& p : n->parents) p->ensure_grad();
        n->backward(*n);
      }
    }
  }

 private:
  std::shared_ptr<Node> node_;
};

}  // namespace textsep::diff
