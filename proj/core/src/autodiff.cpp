#include "seld/autodiff.hpp"

#include <stdexcept>

namespace seld {

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_[name] = params_.size();
  Tensor grad(value.shape(), 0.0);
  params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), trainable});
  return params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParameterStore::get(const std::string& name) {
  auto* p = find(name);
  if (!p) throw std::out_of_range("unknown parameter: " + name);
  return *p;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

const Shape& Var::shape() const {
  if (!graph) throw std::logic_error("Var is not bound to a graph");
  return graph->shape(id);
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return Var{this, nodes_.size() - 1};
}

void Graph::check_owner(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) throw std::invalid_argument("Var belongs to a different graph");
}

Var Graph::input(const std::string& name, Shape shape) {
  if (inputs_by_name_.count(name)) throw std::invalid_argument("duplicate graph input: " + name);
  (void)shape_numel(shape);
  Node n{Kind::input, "input", name, {}, shape, Tensor{}, {}, false, false, nullptr, {}, {}};
  inputs_by_name_[name] = nodes_.size();
  return push(std::move(n));
}

Var Graph::constant(Tensor value) {
  Shape s = value.shape();
  return push(Node{Kind::constant, "constant", "", {}, s, std::move(value), {}, false, false, nullptr, {}, {}});
}

Var Graph::variable(Tensor value, bool requires_grad) {
  Shape s = value.shape();
  return push(
      Node{Kind::variable, "variable", "", {}, s, std::move(value), {}, requires_grad, false, nullptr, {}, {}});
}

Var Graph::parameter(Parameter& p) {
  return push(Node{Kind::parameter, "parameter", p.name, {}, p.value.shape(), {}, {}, p.trainable, false, &p, {},
                   {}});
}

Var Graph::apply(std::string primitive, std::vector<Var> inputs, Shape out_shape, ForwardFn forward,
                 BackwardFn backward) {
  Node n;
  n.kind = Kind::op;
  n.primitive = std::move(primitive);
  n.shape = std::move(out_shape);
  (void)shape_numel(n.shape);
  for (auto& v : inputs) {
    check_owner(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  return push(std::move(n));
}

void Graph::set_value(Var leaf, Tensor value) {
  check_owner(leaf);
  auto& n = nodes_[leaf.id];
  if (n.kind != Kind::variable && n.kind != Kind::constant && n.kind != Kind::input) {
    throw std::invalid_argument("set_value on a non-leaf node");
  }
  if (value.shape() != n.shape) {
    throw std::invalid_argument("set_value: expected shape " + shape_str(n.shape) + ", got " +
                                shape_str(value.shape()));
  }
  n.value = std::move(value);
  evaluated_ = false;
}

const Tensor& Graph::node_value(const Node& n) const {
  return n.kind == Kind::parameter ? n.param->value : n.value;
}

void Graph::forward_eval(const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, t] : inputs) {
    auto it = inputs_by_name_.find(name);
    if (it == inputs_by_name_.end()) throw std::invalid_argument("unknown graph input: " + name);
    auto& n = nodes_[it->second];
    if (t.shape() != n.shape) {
      throw std::invalid_argument("input '" + name + "': expected shape " + shape_str(n.shape) + ", got " +
                                  shape_str(t.shape()));
    }
    n.value = t;
  }
  std::vector<const Tensor*> ins;
  for (auto& n : nodes_) {
    if (n.kind == Kind::parameter && n.param->value.shape() != n.shape) {
      throw std::runtime_error("parameter '" + n.name + "' changed shape since graph construction");
    }
    if (n.kind == Kind::input && n.value.shape() != n.shape) {
      throw std::invalid_argument("graph input '" + n.name + "' is not bound");
    }
    if (n.kind != Kind::op) continue;
    ins.clear();
    for (auto id : n.inputs) ins.push_back(&node_value(nodes_[id]));
    if (n.value.shape() != n.shape) n.value = Tensor(n.shape);
    n.forward(ins, n.value);
  }
  evaluated_ = true;
}

std::map<std::string, Tensor> Graph::forward_eval(const std::map<std::string, Tensor>& inputs,
                                                  const std::map<std::string, Var>& outputs) {
  forward_eval(inputs);
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : outputs) out[name] = value(v);
  return out;
}

const Tensor& Graph::value(Var v) const {
  check_owner(v);
  const auto& n = nodes_[v.id];
  if (n.kind == Kind::op && !evaluated_) throw std::logic_error("value() requested before forward_eval");
  return node_value(n);
}

void Graph::backward(Var output, const Tensor& seed) {
  check_owner(output);
  if (!evaluated_) throw std::logic_error("backward called before forward_eval");
  auto& out = nodes_[output.id];
  if (seed.shape() != out.shape) {
    throw std::invalid_argument("backward seed shape " + shape_str(seed.shape()) + " does not match output " +
                                shape_str(out.shape));
  }
  for (auto& n : nodes_) {
    if (n.kind == Kind::op) n.has_grad = false;
  }
  // Interior buffers are zeroed lazily on first touch; leaf buffers persist.
  auto touch = [](Node& n) -> Tensor& {
    if (n.grad.shape() != n.shape) {
      n.grad = Tensor(n.shape);
    } else if (n.kind == Kind::op && !n.has_grad) {
      n.grad.fill(0.0);
    }
    n.has_grad = true;
    return n.grad;
  };
  if (!out.requires_grad) return;
  auto& g0 = touch(out);
  for (std::size_t i = 0; i < seed.size(); ++i) g0[i] += seed[i];

  std::vector<const Tensor*> ins;
  std::vector<Tensor*> gins;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (n.kind != Kind::op || !n.has_grad || !n.requires_grad) continue;
    ins.clear();
    gins.clear();
    for (auto in_id : n.inputs) {
      auto& in = nodes_[in_id];
      ins.push_back(&node_value(in));
      if (!in.requires_grad) {
        gins.push_back(nullptr);
        continue;
      }
      gins.push_back(&touch(in));
    }
    n.backward(ins, n.value, n.grad, gins);
  }
}

void Graph::backward(Var scalar_output) {
  check_owner(scalar_output);
  if (shape_numel(nodes_[scalar_output.id].shape) != 1) {
    throw std::invalid_argument("backward without a seed needs a scalar output, got shape " +
                                shape_str(nodes_[scalar_output.id].shape));
  }
  backward(scalar_output, Tensor(nodes_[scalar_output.id].shape, 1.0));
}

const Tensor& Graph::grad(Var v) const {
  check_owner(v);
  const auto& n = nodes_[v.id];
  if (!n.requires_grad) throw std::logic_error("grad() on a node that does not require grad");
  if (n.grad.shape() != n.shape) throw std::logic_error("grad() before backward");
  return n.grad;
}

bool Graph::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id].requires_grad;
}

void Graph::zero_grad() {
  for (auto& n : nodes_) {
    if (n.grad.shape() == n.shape) n.grad.fill(0.0);
    n.has_grad = false;
  }
}

void Graph::accumulate_parameter_grads() const {
  for (const auto& n : nodes_) {
    if (n.kind != Kind::parameter || !n.requires_grad || n.grad.shape() != n.shape) continue;
    auto& g = n.param->grad;
    if (g.shape() != n.shape) g = Tensor(n.shape);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

Var Binder::operator()(Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var v = graph_.parameter(p);
  bound_[&p] = v;
  return v;
}

}  // namespace seld
