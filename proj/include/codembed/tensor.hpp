#pragma once

// Reverse-mode automatic differentiation over dense row-major Eigen matrices.
//
// Every tensor on a tape is two-dimensional: rows x cols. Scalars are 1x1,
// vectors are 1xn or nx1. Higher-rank quantities (hidden states, attention
// scores) are flattened into rows with an explicit layout descriptor.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace codembed {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Raised whenever operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the tape (double backward, non-scalar loss, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// A named trainable tensor living outside any tape. Gradients from every
/// tape that references it accumulate into `grad`.
template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix<Scalar> v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

template <typename Scalar>
class Tape;

/// Lightweight handle to a node on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, Index id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  const Matrix<Scalar>& grad() const { return tape_->grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  std::string shape() const { return shape_string(rows(), cols()); }
  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape());
    return value()(0, 0);
  }

  Tape<Scalar>* tape() const { return tape_; }
  Index id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  Index id_ = -1;
};

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// the node list is already a topological order; backward walks it in
/// reverse and visits each node once.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives gradient.
  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr, nullptr); }

  /// Leaf that receives gradient, readable via Var::grad() after backward().
  Var<Scalar> variable(Mat value) {
    return push(std::move(value), grad_enabled_, nullptr, nullptr);
  }

  /// Leaf bound to an external parameter; backward() adds into param.grad.
  Var<Scalar> param(Parameter<Scalar>& p) {
    const bool rg = grad_enabled_ && p.trainable;
    return push(p.value, rg, nullptr, rg ? &p : nullptr);
  }

  /// Leaf bound to a read-only parameter (inference).
  Var<Scalar> param(const Parameter<Scalar>& p) { return constant(p.value); }

  /// Append the result of an operation. `fn` is kept only if some input
  /// requires gradient and recording is enabled.
  template <typename... Inputs>
  Var<Scalar> record(Mat value, BackwardFn fn, const Inputs&... inputs) {
    const bool rg = grad_enabled_ && (false || ... || inputs.requires_grad());
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, nullptr);
  }

  Var<Scalar> record_many(Mat value, BackwardFn fn, const std::vector<Var<Scalar>>& inputs) {
    bool rg = false;
    for (const auto& v : inputs) rg = rg || v.requires_grad();
    rg = rg && grad_enabled_;
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, nullptr);
  }

  /// Add `g` into the gradient buffer of node `id` (no-op for constants).
  template <typename Derived>
  void accumulate(Index id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    accumulate(v.id(), g);
  }

  void backward(const Var<Scalar>& loss) {
    if (loss.tape() != this) throw TapeError("backward: loss belongs to another tape");
    if (backward_done_) throw TapeError("backward: already called on this tape; reset() first");
    if (loss.size() != 1) throw TapeError("backward: loss must be scalar, got " + loss.shape());
    if (!loss.requires_grad()) throw TapeError("backward: loss is detached from every parameter");
    backward_done_ = true;
    nodes_[static_cast<std::size_t>(loss.id())].grad = Mat::Ones(1, 1);
    for (Index i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0) continue;
      if (n.param != nullptr) n.param->grad += n.grad;
      if (n.backward) {
        // Moved out so node storage may grow safely and the closure's
        // captured buffers are released once used.
        BackwardFn fn = std::move(n.backward);
        n.backward = nullptr;
        fn(*this, nodes_[static_cast<std::size_t>(i)].grad);
      }
    }
  }

  /// Drop every recorded node.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  const Mat& value(Index id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(Index id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Mat& grad(Index id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0 && n.requires_grad) {
      // Reachable but never touched: zero gradient of matching shape.
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
  };

  Var<Scalar> push(Mat value, bool rg, BackwardFn fn, Parameter<Scalar>* p) {
    nodes_.push_back(Node{std::move(value), Mat{}, rg, std::move(fn), p});
    return Var<Scalar>(this, static_cast<Index>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

}  // namespace codembed
