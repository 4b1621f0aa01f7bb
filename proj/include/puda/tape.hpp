#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "puda/tensor.hpp"

namespace puda::ad {

/// A trainable tensor plus its gradient and ADAM moment buffers.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;  // dotted path, e.g. "encoder.mlp1.weight"
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  long step_count = 0;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Propagates the gradient of node `self` into the gradients of its inputs.
using BackwardFn = std::function<void(Tape& tape, std::size_t self)>;

/// Append-only record of a forward computation for reverse-mode
/// differentiation.
///
/// Node ids are assigned in creation order, so inputs always precede the
/// nodes that consume them and backward() is a single reverse sweep.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Differentiable input; its gradient is read back with grad().
  Var leaf(Tensor value);
  /// Differentiable input whose gradient is accumulated into `p.grad`
  /// when backward() runs.
  Var param(Parameter& p);

  /// Used by op implementations. `fn` is dropped when no input needs a
  /// gradient.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs,
             BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);
  /// Same, with an explicit upstream gradient for `output`.
  void backward(Var output, const Tensor& seed);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return value(v.id()); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_[id].inputs;
  }
  std::size_t size() const { return nodes_.size(); }

  /// Keep gradients of interior nodes after backward() so grad() can read
  /// them; by default only leaves and parameters keep theirs.
  void set_retain_grads(bool on) { retain_grads_ = on; }

  /// Gradient of the last backward() w.r.t. `v`; zeros when untouched.
  Tensor grad(Var v) const;

  /// Gradient buffer of node `id`, allocated (zero) on first use. Only
  /// meaningful inside backward functions.
  Tensor& grad_buffer(std::size_t id);
  /// Upstream gradient of node `id` during the sweep.
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Reject non-finite forward values as soon as they are recorded.
  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

  /// Nodes visited by the most recent backward sweep.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable references while ops append nodes
  bool check_finite_;
  bool retain_grads_ = false;
  std::size_t visits_ = 0;
};

}  // namespace puda::ad
