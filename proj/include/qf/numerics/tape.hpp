#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qf/numerics/tensor.hpp"

namespace qf {

class Tape;

namespace detail {
struct Node {
  DualTensor tensor;
  bool needs_grad = false;
};
}  // namespace detail

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return node_ != nullptr; }
  Tape& tape() const { return *tape_; }
  DualTensor& tensor() const { return node_->tensor; }
  const Shape& shape() const { return node_->tensor.shape(); }
  std::size_t rows() const { return node_->tensor.rows(); }
  std::size_t cols() const { return node_->tensor.cols(); }
  std::size_t size() const { return node_->tensor.size(); }
  const std::vector<double>& value() const { return node_->tensor.values(); }
  std::vector<double>& grad() const { return node_->tensor.grad(); }
  double item() const { return node_->tensor.values().at(0); }
  bool needs_grad() const { return node_->needs_grad; }

  friend bool operator==(const Var& a, const Var& b) { return a.node_ == b.node_; }

 private:
  friend class Tape;
  Var(Tape* t, detail::Node* n) : tape_(t), node_(n) {}
  Tape* tape_ = nullptr;
  detail::Node* node_ = nullptr;
};

/// Reverse-mode recording of one computation.
///
/// Every kernel appends its output node and, when any input needs a gradient,
/// a closure that pushes the output gradient back to its inputs. Parameter
/// leaves hold a private copy of the parameter values and their own gradient
/// buffer; accumulate_param_grads() folds those into the parameter tensors,
/// so independent tapes can run concurrently over shared parameters.
class Tape {
 public:
  Tape() = default;
  /// A tape built with record_grads = false binds parameters without
  /// gradients, so nothing is recorded for backward.
  explicit Tape(bool record_grads) : record_grads_(record_grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf with no gradient.
  Var constant(DualTensor t) {
    auto& n = nodes_.emplace_back();
    t.zero_grad();
    n.tensor = std::move(t);
    n.needs_grad = false;
    return {this, &n};
  }

  /// Gradient-carrying leaf bound to an external parameter. Repeated calls
  /// with the same parameter return the same node.
  Var param(DualTensor& p) {
    if (auto it = param_index_.find(&p); it != param_index_.end()) return {this, it->second};
    auto& n = nodes_.emplace_back();
    n.tensor = DualTensor(p.shape(), p.values());
    n.needs_grad = record_grads_;
    param_index_.emplace(&p, &n);
    params_.emplace_back(&p, &n);
    return {this, &n};
  }

  /// Fresh zero-valued intermediate.
  Var emit(Shape shape, bool needs_grad) {
    auto& n = nodes_.emplace_back();
    n.tensor = DualTensor(std::move(shape));
    n.needs_grad = needs_grad;
    return {this, &n};
  }

  void record(std::function<void()> backward) { backward_.push_back(std::move(backward)); }

  /// Seeds d(out)/d(out) = 1 and runs every recorded closure in reverse.
  void backward(const Var& out) {
    if (out.size() != 1) throw ShapeError("backward: output must be a scalar, got " + to_string(out.shape()));
    if (!out.needs_grad()) return;
    out.grad()[0] += 1.0;
    for (auto it = backward_.rbegin(); it != backward_.rend(); ++it) (*it)();
    backward_.clear();
  }

  /// Adds every parameter leaf's gradient into the bound parameter, in binding order.
  void accumulate_param_grads() const {
    for (const auto& [p, n] : params_) {
      auto& dst = p->grad();
      const auto& src = n->tensor.grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  bool record_grads_ = true;
  std::deque<detail::Node> nodes_;
  std::vector<std::function<void()>> backward_;
  std::vector<std::pair<DualTensor*, detail::Node*>> params_;
  std::unordered_map<const DualTensor*, detail::Node*> param_index_;
};

}  // namespace qf
