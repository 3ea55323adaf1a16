#include "esr/autograd.hpp"

#include "esr/error.hpp"

namespace esr::nd {

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::param(const Parameter<T>& p) {
  auto it = params_.find(&p);
  if (it != params_.end()) return Var<T>(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, true});
  const std::size_t id = nodes_.size() - 1;
  params_.emplace(&p, id);
  return Var<T>(this, id);
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn backward) {
  bool needs = false;
  for (auto id : inputs) needs = needs || nodes_.at(id).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Graph<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph_ != this) throw ArgumentError("backward: variable belongs to another graph");
  if (value(loss.id()).numel() != 1) {
    throw ArgumentError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  grad(loss.id())[0] = T{1};
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
    ++backward_calls_;
  }
}

template <typename T>
const Tensor<T>* Graph<T>::grad_of(const Parameter<T>& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.empty() ? nullptr : &n.grad;
}

template <typename T>
void Graph<T>::accumulate_grads(Parameter<T>& p, T scale) const {
  const Tensor<T>* g = grad_of(p);
  if (!g) return;
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
  auto dst = p.grad.data();
  auto src = g->data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

template class Graph<float>;
template class Graph<double>;

}  // namespace esr::nd
