#include "puda/tape.hpp"

namespace puda::ad {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)),
      value(std::move(value_)),
      grad(Tensor::zeros_like(value)),
      adam_m(Tensor::zeros_like(value)),
      adam_v(Tensor::zeros_like(value)) {}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

Tape::Tape() {
#ifdef NDEBUG
  check_finite_ = false;
#else
  check_finite_ = true;
#endif
}

Var Tape::push(Node node) {
  if (check_finite_ && !node.value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") +
                       node.op + "'");
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs,
                 BackwardFn fn) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (auto id : inputs) {
    if (id >= nodes_.size()) {
      throw ContractError(std::string("op '") + op +
                          "' references a node from another tape");
    }
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.empty() != n.value.empty()) {
    n.grad = Tensor::zeros_like(n.value);
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward on a foreign Var");
  if (value(loss).size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(value(loss).shape()));
  }
  backward(loss, Tensor(value(loss).shape(), 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  if (output.tape() != this) throw ContractError("backward on a foreign Var");
  if (seed.shape() != value(output).shape()) {
    throw DimensionError("backward seed shape " + shape_str(seed.shape()) +
                         " does not match output " +
                         shape_str(value(output).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  visits_ = 0;
  grad_buffer(output.id()) = seed;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      auto& g = n.param->grad;
      if (g.shape() != n.grad.shape()) g = Tensor::zeros_like(n.param->value);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
    // Interior gradients are dead once propagated; only leaves and params
    // are read back.
    if (n.backward && !retain_grads_) n.grad = Tensor();
  }
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id());
  if (n.grad.empty() && !n.value.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

}  // namespace puda::ad
