#pragma once

// Reverse-mode differentiation over dense NCHW arrays.
//
// A Tensor is a shared handle to a graph node. Ops record a backward closure on
// a Tape when any input requires a gradient; Tape::backward replays them in
// reverse recording order, which is a valid topological order because an op can
// only consume tensors that already exist.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthdiff/errors.hpp"

namespace depthdiff::ad {

using Shape = std::vector<int>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

inline Eigen::Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Eigen::Index{1},
                         [](Eigen::Index acc, int d) { return acc * d; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
struct Node {
  Shape shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;
  bool requires_grad = false;
  bool leaf = true;

  /// Gradient storage, zero-allocated on first use.
  Vector<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Vector<Scalar>::Zero(value.size());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;

  Tensor(Shape shape, Vector<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    for (int d : shape) {
      if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    }
    if (numel(shape) != value.size()) {
      throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                           " values, got " + std::to_string(value.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), Vector<Scalar>::Zero(n), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), Vector<Scalar>::Constant(n, v));
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values,
                            bool requires_grad = false) {
    Vector<Scalar> v(static_cast<Eigen::Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  Eigen::Index size() const { return node_->value.size(); }

  Vector<Scalar>& value() { return node_->value; }
  const Vector<Scalar>& value() const { return node_->value; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Vector<Scalar>& grad() const { return node_->grad; }
  Vector<Scalar>& grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }
  /// Drops the gradient buffer entirely (has_grad() becomes false).
  void clear_grad() { node_->grad.resize(0); }

  Scalar item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value(0);
  }

  /// New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const { return Tensor(shape(), value(), false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <typename Scalar>
class Tape {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  /// Whether an op with these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor<Scalar>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(const Tensor<Scalar>& output, std::function<void()> backward) {
    output.node()->leaf = false;
    output.node()->requires_grad = true;
    ops_.push_back(Op{output.node(), std::move(backward)});
  }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires a gradient. Intermediate gradients are reset on every call;
  /// leaf gradients accumulate until the caller zeroes them.
  void backward(const Tensor<Scalar>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw UsageError("loss does not depend on any tensor requiring grad");
    bool on_tape = loss.is_leaf();
    for (const auto& op : ops_) on_tape = on_tape || op.output == loss.node();
    if (!on_tape) throw UsageError("loss was not recorded on this tape");

    for (auto& op : ops_) op.output->grad_buffer().setZero();
    auto& seed = loss.node()->grad_buffer();
    if (loss.is_leaf()) {
      seed(0) += Scalar(1);
    } else {
      seed(0) = Scalar(1);
    }
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

 private:
  struct Op {
    NodePtr output;
    std::function<void()> backward;
  };

  bool recording_;
  std::vector<Op> ops_;
};

}  // namespace depthdiff::ad
