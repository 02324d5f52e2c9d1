#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmrec/errors.hpp"
#include "mmrec/tensor.hpp"

namespace mmrec {

// A named trainable tensor. The gradient buffer is created on first use and
// always matches the value's shape.
class Parameter {
 public:
  Parameter(std::string name, Tensor value, bool frozen = false)
      : name_(std::move(name)), value_(std::move(value)), frozen_(frozen) {}

  const std::string& name() const { return name_; }
  const Tensor& value() const { return value_; }
  Tensor& value() { return value_; }
  const Shape& shape() const { return value_.shape(); }
  std::size_t size() const { return value_.size(); }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  bool has_grad() const { return has_grad_; }
  const Tensor& grad() const { return grad_; }
  Tensor& grad() {
    ensure_grad();
    return grad_;
  }
  void zero_grad() {
    ensure_grad();
    std::fill(grad_.data().begin(), grad_.data().end(), 0.0);
  }
  void clear_grad() {
    grad_ = Tensor();
    has_grad_ = false;
  }

 private:
  void ensure_grad() {
    if (!has_grad_) {
      grad_ = Tensor::zeros(value_.shape());
      has_grad_ = true;
    }
  }

  std::string name_;
  Tensor value_;
  Tensor grad_;
  bool has_grad_ = false;
  bool frozen_ = false;
};

template <class T>
class BasicTape;

// Handle to one value recorded on a tape.
template <class T>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  BasicTape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Shape& shape() const;
  inline std::size_t size() const;
  inline std::size_t rows() const;
  inline std::size_t cols() const;
  inline std::span<const T> value() const;
  inline std::span<const T> grad() const;
  inline T item() const;
  inline bool requires_grad() const;
  inline Tensor to_tensor() const;

 private:
  BasicTape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { kRecord, kInference };

// Record-then-reverse autodiff. Every recorded operation keeps a forward
// closure (so the tape can be re-evaluated in place after a parameter is
// perturbed) and a backward closure that accumulates into its inputs.
// Nodes are appended in execution order, so the tape is topologically sorted.
template <class T>
class BasicTape {
 public:
  using Var = BasicVar<T>;
  using Kernel = std::function<void(BasicTape&, std::size_t)>;

  explicit BasicTape(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  GradMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  Var constant(const Tensor& value) {
    Node node;
    node.shape = value.shape();
    node.value.assign(value.data().begin(), value.data().end());
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  // Leaf bound to a parameter's storage. One leaf per parameter per tape.
  Var parameter(Parameter& p) {
    if (auto it = param_leaf_.find(&p); it != param_leaf_.end()) return Var(this, it->second);
    Node node;
    node.shape = p.shape();
    node.param = &p;
    node.requires_grad = mode_ == GradMode::kRecord && !p.frozen();
    if constexpr (!std::is_same_v<T, double>) {
      // Wider tapes hold a converted copy, refreshed whenever the leaf is replayed.
      node.value.resize(p.size());
      node.forward = [](BasicTape& t, std::size_t o) {
        const auto src = t.nodes_[o].param->value().data();
        std::copy(src.begin(), src.end(), t.nodes_[o].value.begin());
      };
    }
    nodes_.push_back(std::move(node));
    if (nodes_.back().forward) nodes_.back().forward(*this, nodes_.size() - 1);
    param_leaf_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  // Appends an operation node and evaluates it. `backward` may be empty for
  // non-differentiable outputs.
  Var record(Shape shape, std::initializer_list<Var> inputs, Kernel forward, Kernel backward) {
    return record(std::move(shape), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(forward), std::move(backward));
  }

  Var record(Shape shape, std::span<const Var> inputs, Kernel forward, Kernel backward) {
    if (backward_done_) throw AutodiffError("cannot record onto a tape after backward()");
    bool needs = false;
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw AutodiffError("operands recorded on different tapes");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    Node node;
    for (const Var& v : inputs) node.inputs.push_back(v.id());
    node.value.assign(num_elements(shape), 0.0);
    node.shape = std::move(shape);
    node.requires_grad = mode_ == GradMode::kRecord && needs;
    node.forward = std::move(forward);
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    nodes_[id].forward(*this, id);
    return Var(this, id);
  }

  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  std::size_t size_of(std::size_t id) const { return num_elements(nodes_[id].shape); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const T* value(std::size_t id) const {
    const Node& n = nodes_[id];
    if constexpr (std::is_same_v<T, double>) {
      if (n.param) return n.param->value().data().data();
    }
    return n.value.data();
  }
  T* mutable_value(std::size_t id) { return nodes_[id].value.data(); }

  // Gradient buffer of a node, or nullptr when no gradient flows into it.
  T* grad(std::size_t id) {
    Node& n = nodes_[id];
    return n.requires_grad && !n.grad.empty() ? n.grad.data() : nullptr;
  }
  const T* grad(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.requires_grad && !n.grad.empty() ? n.grad.data() : nullptr;
  }

  bool backward_done() const { return backward_done_; }

  // Seeds d(loss)/d(loss) = 1 and runs every backward closure in exact
  // reverse recording order, then accumulates leaf gradients into their
  // parameters.
  void backward(Var loss) {
    if (&loss.tape() != this) throw AutodiffError("loss belongs to another tape");
    if (backward_done_) throw AutodiffError("backward() called twice on the same tape");
    if (nodes_.empty()) throw AutodiffError("backward() on an empty tape");
    if (size_of(loss.id()) != 1) {
      throw AutodiffError("backward() needs a scalar loss, got shape " +
                          shape_string(nodes_[loss.id()].shape));
    }
    backward_done_ = true;
    for (Node& n : nodes_) {
      if (n.requires_grad) n.grad.assign(num_elements(n.shape), 0.0);
    }
    if (nodes_[loss.id()].requires_grad) nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
    for (auto& [param, id] : param_leaf_) {
      const Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      auto g = param->grad().data();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }

  // Re-evaluates every operation at or after `first` using current input
  // values (parameters are read through their live storage).
  void replay_from(std::size_t first) {
    for (std::size_t i = first; i < nodes_.size(); ++i) {
      if (nodes_[i].forward) nodes_[i].forward(*this, i);
    }
  }

  // Every node whose value can change when node `source` changes, in tape
  // order (excluding `source`).
  std::vector<std::size_t> dependents_of(std::size_t source) const {
    std::vector<char> hit(nodes_.size(), 0);
    hit[source] = 1;
    std::vector<std::size_t> out;
    for (std::size_t i = source + 1; i < nodes_.size(); ++i) {
      for (std::size_t in : nodes_[i].inputs) {
        if (hit[in]) {
          hit[i] = 1;
          out.push_back(i);
          break;
        }
      }
    }
    return out;
  }

  // Re-evaluates the listed nodes, which must be in tape order.
  void replay(const std::vector<std::size_t>& ids) {
    for (std::size_t i : ids) {
      if (nodes_[i].forward) nodes_[i].forward(*this, i);
    }
  }

  // Position of a parameter's leaf, if it was used on this tape.
  std::optional<std::size_t> leaf_of(const Parameter& p) const {
    auto it = param_leaf_.find(const_cast<Parameter*>(&p));
    if (it == param_leaf_.end()) return std::nullopt;
    return it->second;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<std::size_t> inputs;
    std::vector<T> value;
    std::vector<T> grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Kernel forward;
    Kernel backward;
  };

  GradMode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_leaf_;
  bool backward_done_ = false;
};

template <class T>
inline const Shape& BasicVar<T>::shape() const { return tape_->shape(id_); }
template <class T>
inline std::size_t BasicVar<T>::size() const { return tape_->size_of(id_); }
template <class T>
inline std::size_t BasicVar<T>::rows() const { return shape().size() < 2 ? 1 : shape()[0]; }
template <class T>
inline std::size_t BasicVar<T>::cols() const { return shape().size() < 2 ? shape()[0] : shape()[1]; }
template <class T>
inline std::span<const T> BasicVar<T>::value() const { return {tape_->value(id_), size()}; }
template <class T>
inline std::span<const T> BasicVar<T>::grad() const {
  const T* g = static_cast<const BasicTape<T>*>(tape_)->grad(id_);
  return g ? std::span<const T>(g, size()) : std::span<const T>();
}
template <class T>
inline T BasicVar<T>::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar of shape " + shape_string(shape()));
  return tape_->value(id_)[0];
}
template <class T>
inline bool BasicVar<T>::requires_grad() const { return tape_->requires_grad(id_); }
template <class T>
inline Tensor BasicVar<T>::to_tensor() const {
  auto v = value();
  return Tensor(shape(), std::vector<double>(v.begin(), v.end()));
}

using Tape = BasicTape<double>;
using Var = BasicVar<double>;

}  // namespace mmrec
