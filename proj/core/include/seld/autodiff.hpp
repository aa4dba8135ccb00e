#pragma once

// Define-then-run reverse-mode differentiation.
//
// A Graph records primitive applications in creation order, which is a
// topological order. forward_eval() binds named inputs and computes every
// node; backward() walks the nodes once in reverse and accumulates input
// gradients. Parameters are shared leaves: the graph reads their value at
// evaluation time and keeps its own gradient buffer, so several graphs can
// evaluate over one parameter snapshot.

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Owns named parameters with stable addresses.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& get(const std::string& name);

  std::size_t size() const { return params_.size(); }
  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }

  /// Learnable scalar count (buffers excluded).
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const { return shape_numel(shape()); }
};

using TensorRefs = std::span<const Tensor* const>;
using GradRefs = std::span<Tensor* const>;
/// Computes `out` (already allocated with the node's shape) from inputs.
using ForwardFn = std::function<void(TensorRefs in, Tensor& out)>;
/// Adds into gin[i] (nullptr when input i needs no gradient).
using BackwardFn = std::function<void(TensorRefs in, const Tensor& out, const Tensor& gout, GradRefs gin)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Placeholder bound by name at forward_eval.
  Var input(const std::string& name, Shape shape);
  Var constant(Tensor value);
  /// Leaf owning its value; differentiable when requires_grad.
  Var variable(Tensor value, bool requires_grad = true);
  /// Leaf reading `p.value` at evaluation time.
  Var parameter(Parameter& p);

  /// Records a primitive. Shape checking is the caller's job.
  Var apply(std::string primitive, std::vector<Var> inputs, Shape out_shape, ForwardFn forward,
            BackwardFn backward);

  void set_value(Var leaf, Tensor value);

  void forward_eval(const std::map<std::string, Tensor>& inputs = {});
  std::map<std::string, Tensor> forward_eval(const std::map<std::string, Tensor>& inputs,
                                             const std::map<std::string, Var>& outputs);

  const Tensor& value(Var v) const;
  bool evaluated() const { return evaluated_; }

  /// Seeds d(output) and propagates. Leaf gradients accumulate across calls
  /// until zero_grad(); interior gradients are reset on every call.
  void backward(Var output, const Tensor& seed);
  void backward(Var scalar_output);

  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const;
  void zero_grad();

  /// Adds this graph's parameter-leaf gradients into Parameter::grad.
  void accumulate_parameter_grads() const;

  const Shape& shape(std::size_t id) const { return nodes_.at(id).shape; }
  const std::string& primitive(std::size_t id) const { return nodes_.at(id).primitive; }
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Kind { input, constant, variable, parameter, op };

  struct Node {
    Kind kind;
    std::string primitive;
    std::string name;
    std::vector<std::size_t> inputs;
    Shape shape;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var push(Node node);
  void check_owner(Var v) const;
  const Tensor& node_value(const Node& n) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> inputs_by_name_;
  bool evaluated_ = false;
};

/// Maps parameters onto graph leaves, once per parameter. Tests redirect
/// parameters to free variables to differentiate with respect to weights.
class Binder {
 public:
  explicit Binder(Graph& g) : graph_(g) {}
  Var operator()(Parameter& p);
  void redirect(const Parameter& p, Var v) { bound_[&p] = v; }
  Graph& graph() { return graph_; }

 private:
  Graph& graph_;
  std::map<const Parameter*, Var> bound_;
};

}  // namespace seld
