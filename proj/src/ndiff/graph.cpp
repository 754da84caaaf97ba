#include "raseg/ndiff/graph.hpp"

namespace raseg::nd {

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Conv3d: return "conv3d";
    case OpKind::TConv3d: return "tconv3d";
    case OpKind::InstanceNorm: return "instance_norm";
    case OpKind::PRelu: return "prelu";
    case OpKind::SpatialDropout: return "spatial_dropout";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::SoftmaxChannel: return "softmax_channel";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::ConcatChannel: return "concat_channel";
    case OpKind::SliceChannel: return "slice_channel";
    case OpKind::SliceDepth: return "slice_depth";
    case OpKind::ConcatDepth: return "concat_depth";
    case OpKind::ConvLstmCell: return "convlstm_cell";
    case OpKind::MeanAxes: return "mean_axes";
    case OpKind::Flatten: return "flatten";
    case OpKind::Loss: return "loss";
  }
  return "?";
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw StateError("graph variable " + std::to_string(v.id) + " was never produced by a forward pass");
  }
  return nodes_[v.id];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(Var v) {
  return const_cast<Node&>(static_cast<const Graph&>(*this).node(v));
}

template <typename T>
Var Graph<T>::input(Tensor5<T> value, bool requires_grad) {
  Node n;
  n.kind = OpKind::Input;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::param(const std::string& name, const Tensor5<T>& value, bool requires_grad) {
  if (auto it = params_.find(name); it != params_.end()) return Var{it->second};
  Node n;
  n.kind = OpKind::Param;
  n.ref = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  params_.emplace(name, id);
  return Var{id};
}

template <typename T>
Var Graph<T>::record(OpKind kind, std::vector<Var> inputs, Tensor5<T> value, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (Var v : inputs) n.requires_grad = n.requires_grad || node(v).requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Tensor5<T>& Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) throw StateError("gradient requested before backward()");
  if (n.grad.empty()) {
    throw StateError("no gradient reached variable " + std::to_string(v.id) + " (" + to_string(n.kind) + ")");
  }
  return n.grad;
}

template <typename T>
Tensor5<T>& Graph<T>::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor5<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var out) {
  if (value(out).size() != 1) {
    throw DimensionError("backward(out) needs a scalar output, got " + value(out).shape().str());
  }
  backward(out, Tensor5<T>(value(out).shape(), T(1)));
}

template <typename T>
void Graph<T>::backward(Var out, const Tensor5<T>& seed) {
  Node& root = node(out);
  if (backward_done_) throw StateError("backward() already ran on this graph");
  if (seed.shape() != value(out).shape()) {
    throw DimensionError("backward seed shape " + seed.shape().str() + " != output " + value(out).shape().str());
  }
  backward_done_ = true;
  root.grad = seed;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    // The closure may allocate grads on earlier nodes; `n` stays valid since
    // nodes_ is not resized during backward.
    n.backward(*this, n.grad);
  }
}

template <typename T>
const Tensor5<T>* Graph<T>::param_grad(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.empty() ? nullptr : &n.grad;
}

template <typename T>
void Graph<T>::accumulate_param_grads(ParamStore<T>& store) const {
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    auto it = store.find(name);
    if (it == store.end()) throw StateError("parameter '" + name + "' not in store");
    Parameter<T>& p = it->second;
    if (p.grad.shape() != p.value.shape() || p.grad.empty()) p.grad = Tensor5<T>(p.value.shape());
    for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace raseg::nd
