#include "skillformer/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "skillformer/error.hpp"

namespace skillformer {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::needs_grad() const { return tape_ != nullptr && tape_->needs_grad(id_); }

Var Tape::push(Node node) {
  node.scope = current_scope_;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  node.op = "constant";
  return push(std::move(node));
}

Var Tape::watch(const Tensor& param) {
  Node node;
  node.external = &param;
  node.needs_grad = param.requires_grad();
  // Gradient sinks are the only mutation performed through a watched tensor.
  node.grad_sink = node.needs_grad ? const_cast<Tensor*>(&param) : nullptr;
  node.op = "parameter";
  return push(std::move(node));
}

Var Tape::input(Tensor value, bool requires_grad) {
  Node node;
  node.owned = std::move(value);
  node.needs_grad = requires_grad;
  node.op = "input";
  return push(std::move(node));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, const char* op, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), op, std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, const char* op, BackwardFn backward) {
  Node node;
  node.owned = std::move(value);
  node.op = op;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw ContractError(std::string("op '") + op + "' mixes values from different tapes");
    node.needs_grad = node.needs_grad || nodes_[in.id_].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_[id];
  return node.external != nullptr ? *node.external : node.owned;
}

std::vector<double>& Tape::adjoint(std::size_t id) {
  Node& node = nodes_[id];
  if (node.adjoint.empty()) node.adjoint.assign(value(id).numel(), 0.0);
  return node.adjoint;
}

std::vector<double> Tape::gradient(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.adjoint.empty()) return std::vector<double>(value(v.id()).numel(), 0.0);
  return node.adjoint;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to another tape");
  const Tensor& loss_value = value(loss.id_);
  if (loss_value.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(loss_value.shape()));
  }
  if (!nodes_[loss.id_].needs_grad) return;
  adjoint(loss.id_)[0] += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.adjoint.empty()) continue;
    if (node.backward) {
      // Inputs always precede their consumer, so this only touches nodes < i.
      node.backward(*this, i, node.adjoint);
      // Intermediate adjoints are dead after their own backward.
      node.adjoint = std::vector<double>();
    } else if (node.grad_sink != nullptr) {
      std::vector<double>& g = node.grad_sink->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += node.adjoint[k];
    }
  }
}

std::optional<Tape::NonFinite> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!value(i).all_finite()) return NonFinite{i, nodes_[i].op, scopes_[nodes_[i].scope]};
  }
  return std::nullopt;
}

Tape::Scope::Scope(Tape& tape, std::string_view name) : tape_(tape), previous_(tape.current_scope_) {
  std::string full = tape.scopes_[previous_];
  if (!full.empty()) full += '.';
  full += name;
  tape.scopes_.push_back(std::move(full));
  tape.current_scope_ = static_cast<std::uint32_t>(tape.scopes_.size() - 1);
}

Tape::Scope::~Scope() { tape_.current_scope_ = previous_; }

}  // namespace skillformer
