#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hlm/common.hpp"

namespace hlm {

using Shape = std::vector<Eigen::Index>;

inline Eigen::Index numel(const Shape& s) {
  Eigen::Index n = 1;
  for (Eigen::Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

/// One node of the dynamically built computation graph. Values are stored
/// flat in row-major order; `shape` gives the logical n-d extents.
template <typename Scalar>
struct TensorNode {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until backward() reaches this node
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward;
};

/// Value-semantics handle to a graph node. Copying a TensorT shares the node.
template <typename Scalar>
class TensorT {
 public:
  using Node = TensorNode<Scalar>;
  using Array = typename Node::Array;

  TensorT() = default;

  static TensorT from_values(Shape shape, const std::vector<Scalar>& v) {
    TensorT t = raw(std::move(shape));
    if (t.size() != static_cast<Eigen::Index>(v.size()))
      throw ShapeError("from_values: " + shape_str(t.shape()) + " needs " +
                       std::to_string(t.size()) + " values, got " +
                       std::to_string(v.size()));
    std::copy(v.begin(), v.end(), t.node_->value.data());
    return t;
  }

  static TensorT zeros(Shape shape) {
    TensorT t = raw(std::move(shape));
    t.node_->value.setZero();
    return t;
  }

  static TensorT full(Shape shape, Scalar fill) {
    TensorT t = raw(std::move(shape));
    t.node_->value.setConstant(fill);
    return t;
  }

  static TensorT scalar(Scalar v) { return full({}, v); }

  /// Uninitialized leaf; caller fills `values()`.
  static TensorT raw(Shape shape) {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.resize(numel(t.node_->shape));
    t.node_->id = detail::next_node_id();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Eigen::Index dim(int i) const {
    if (i < 0) i += rank();
    return node_->shape[static_cast<std::size_t>(i)];
  }
  Eigen::Index size() const { return node_->value.size(); }

  Array& values() { return node_->value; }
  const Array& values() const { return node_->value; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() > 0; }
  Array& grad() {
    if (node_->grad.size() == 0) {
      node_->grad.resize(node_->value.size());
      node_->grad.setZero();
    }
    return node_->grad;
  }
  const Array& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->grad.size() > 0) node_->grad.setZero();
  }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node with requires_grad set (leaves keep accumulating across
/// calls until zero_grad()).
template <typename Scalar>
void backward(const TensorT<Scalar>& loss) {
  using Node = TensorNode<Scalar>;
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward() expects a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative DFS; nodes come out in creation order, reversed for the sweep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  for (Node* n : order) {
    if (n->grad.size() == 0) {
      n->grad.resize(n->value.size());
      n->grad.setZero();
    }
  }
  loss.node()->grad[0] += Scalar(1);
  for (Node* n : order) {
    if (n->backward) n->backward(*n);
  }
}

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace hlm
