#pragma once

#include <cstddef>
#include <functional>
#include <unordered_map>
#include <vector>

#include "esr/tensor.hpp"

namespace esr::nd {

template <typename T>
class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid as long as
/// the owning graph lives.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape order is a
/// topological order and `backward` simply walks it in reverse. Parameters
/// enter as leaves (one leaf per Parameter per graph); their gradients stay
/// on the tape until `grad_of` / `accumulate_grads` reads them out, which
/// keeps forward passes free of writes to the model.
template <typename T>
class Graph {
 public:
  /// Propagates the output node's gradient into its inputs.
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf for p. The value is copied on first use; later calls on this graph
  /// return the same leaf even if p changed since.
  Var<T> param(const Parameter<T>& p);

  /// Appends an op result. `backward` may be empty for ops without inputs
  /// that require gradients.
  Var<T> record(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Gradient buffer of a node, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id);
  const Tensor<T>& grad_view(std::size_t id) const { return nodes_[id].grad; }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward function
  /// once, newest first. `loss` must hold a single element.
  void backward(Var<T> loss);

  /// Gradient of a parameter leaf after backward; nullptr when the parameter
  /// was not used on this graph or received no gradient.
  const Tensor<T>* grad_of(const Parameter<T>& p) const;

  /// p.grad += scale * grad_of(p), for a parameter used on this graph.
  void accumulate_grads(Parameter<T>& p, T scale = T{1}) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_calls() const { return backward_calls_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> params_;
  std::size_t backward_calls_ = 0;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace esr::nd
