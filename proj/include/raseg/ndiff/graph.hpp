#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "raseg/ndiff/tensor.hpp"

namespace raseg::nd {

enum class OpKind {
  Input,
  Param,
  Conv3d,
  TConv3d,
  InstanceNorm,
  PRelu,
  SpatialDropout,
  Sigmoid,
  SoftmaxChannel,
  Add,
  Mul,
  ConcatChannel,
  SliceChannel,
  SliceDepth,
  ConcatDepth,
  ConvLstmCell,
  MeanAxes,
  Flatten,
  Loss,
};

const char* to_string(OpKind kind);

/// Handle to a node recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
struct Parameter {
  Tensor5<T> value;
  Tensor5<T> grad;
};

/// Named parameters in deterministic (lexicographic) order.
template <typename T>
using ParamStore = std::map<std::string, Parameter<T>>;

template <typename T>
void zero_grads(ParamStore<T>& store) {
  for (auto& [name, p] : store) p.grad = Tensor5<T>(p.value.shape());
}

template <typename T>
std::size_t parameter_count(const ParamStore<T>& store) {
  std::size_t n = 0;
  for (const auto& [name, p] : store) n += p.value.size();
  return n;
}

/// Reverse-mode tape. Nodes are appended in execution order; backward walks
/// them in reverse. Parameter nodes reference tensors owned elsewhere, which
/// must outlive the graph.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor5<T>& out_grad)>;

  explicit Graph(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }
  Rng& rng() { return rng_; }

  Var input(Tensor5<T> value, bool requires_grad = false);
  /// Registers a parameter by reference; repeated names return the same node.
  Var param(const std::string& name, const Tensor5<T>& value, bool requires_grad = true);
  Var record(OpKind kind, std::vector<Var> inputs, Tensor5<T> value, BackwardFn backward);

  const Tensor5<T>& value(Var v) const { return node(v).ref ? *node(v).ref : node(v).value; }
  const Shape5& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  OpKind kind(Var v) const { return node(v).kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the backward seed w.r.t. `v`; StateError before backward().
  const Tensor5<T>& grad(Var v) const;
  /// Zero-initialised accumulator, for use inside backward closures.
  Tensor5<T>& grad_buffer(Var v);

  /// Scalar output only (seed 1).
  void backward(Var out);
  void backward(Var out, const Tensor5<T>& seed);

  /// Gradient accumulated for a named parameter, or nullptr if the parameter
  /// was not used or received none.
  const Tensor5<T>* param_grad(const std::string& name) const;
  /// Adds every parameter gradient into `store[name].grad`.
  void accumulate_param_grads(ParamStore<T>& store) const;

 private:
  struct Node {
    OpKind kind = OpKind::Input;
    std::vector<Var> inputs;
    Tensor5<T> value;
    const Tensor5<T>* ref = nullptr;
    Tensor5<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  bool training_;
  Rng rng_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace raseg::nd
