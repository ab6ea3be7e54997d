#ifndef BITFOLD_GRAPH_HPP_
#define BITFOLD_GRAPH_HPP_

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "bitfold/tensor.hpp"

namespace bitfold {

/// Named trainable tensors. Iteration order is the sorted name order, which
/// keeps optimizer updates and checkpoint layout deterministic.
class ParameterSet {
public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t tensor_count() const { return values_.size(); }
  std::size_t scalar_count() const;
  /// Copies every tensor from `other` whose name is also present here.
  void assign_from(const ParameterSet& other);
  /// Appends all entries of `other`; names must not collide.
  void merge(const ParameterSet& other);
  ParameterSet subset(const std::string& prefix) const;

  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }
  auto begin() { return values_.begin(); }
  auto end() { return values_.end(); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.values_ == b.values_; }

private:
  std::map<std::string, Tensor> values_;
};

using Gradients = std::map<std::string, Tensor>;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid until the graph is
/// destroyed or backward() has run.
class Var {
public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
  int rank() const { return value().rank(); }
  bool requires_grad() const;
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// Tape of one forward pass. Nodes are appended in evaluation order, which is
/// a topological order; backward() walks it in reverse once and then clears
/// the tape.
class Graph {
public:
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// Leaf bound to a named parameter. Repeated requests return the same node.
  Var param(const ParameterSet& params, const std::string& name);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Adds `g` into the gradient buffer of node `id` if it requires grad.
  void accumulate(int id, const Tensor& g);
  /// Gradient buffer for node `id`, allocated as zeros on first use.
  Tensor& grad_buffer(int id);

  /// Reverse pass from a scalar loss. Returns one entry per tensor of `params`
  /// (zeros for parameters the loss does not reach) and clears the tape.
  Gradients backward(Var loss, const ParameterSet& params);

  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param_name;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

/// Deterministic parameter initialisation. The stream for each tensor is keyed
/// by (seed, name) so adding or removing modules never perturbs the others.
std::uint64_t name_seed(std::uint64_t seed, const std::string& name);
Tensor init_normal(const Shape& shape, double stddev, std::uint64_t seed, const std::string& name);
Tensor init_uniform(const Shape& shape, double bound, std::uint64_t seed, const std::string& name);

} // namespace bitfold

#endif
