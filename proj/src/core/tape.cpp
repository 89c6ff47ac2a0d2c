#include "core/tape.hpp"

namespace ovk {

Tensor Tape::leaf(const Tensor& value, bool is_param) {
  if (value.on_tape() && value.tape() == this) return value;
  Node n;
  n.dims = value.dims();
  n.numel = value.numel();
  n.is_param = is_param;
  nodes_.push_back(std::move(n));
  Tensor bound = value;
  bound.tape_ = this;
  bound.node_ = static_cast<int64_t>(nodes_.size()) - 1;
  return bound;
}

int64_t Tape::add_node(const std::vector<int64_t>& out_dims, int64_t out_numel,
                       std::vector<int64_t> inputs, BackwardFn bwd) {
  Node n;
  n.dims = out_dims;
  n.numel = out_numel;
  n.inputs = std::move(inputs);
  n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  return static_cast<int64_t>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buffer(int64_t node) {
  auto& g = grads_[static_cast<size_t>(node)];
  if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0);
  return g;
}

void Tape::accumulate(int64_t node, const std::vector<double>& contribution) {
  auto& g = grad_buffer(node);
  for (size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

void Tape::accumulate_at(int64_t node, int64_t offset, double value) {
  grad_buffer(node)[static_cast<size_t>(offset)] += value;
}

void Tape::backward(const Tensor& scalar_output) {
  if (!scalar_output.on_tape() || scalar_output.tape() != this)
    fail(ErrorCode::NoTape, "backward: output is not bound to this tape");
  if (scalar_output.numel() != 1)
    fail(ErrorCode::InvalidShape, "backward: output must be a 1-element tensor");
  if (backward_done_)
    fail(ErrorCode::TapeState, "backward: already run on this tape; call reset() first");
  backward_done_ = true;

  grads_.assign(nodes_.size(), {});
  grad_buffer(scalar_output.node())[0] = 1.0;

  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.bwd) continue;
    auto& g = grads_[static_cast<size_t>(i)];
    if (g.empty()) continue;  // node does not influence the output
    n.bwd(*this, g);
  }

  // Parameter leaves always report a gradient, zero when unreachable.
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].is_param) grad_buffer(static_cast<int64_t>(i));
}

void Tape::reset() {
  grads_.clear();
  backward_done_ = false;
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.on_tape() || t.tape() != this) fail(ErrorCode::NoTape, "grad: tensor not on this tape");
  if (!backward_done_) fail(ErrorCode::TapeState, "grad: backward has not run");
  const auto& g = grads_[static_cast<size_t>(t.node())];
  if (g.empty()) return Tensor::zeros(t.dims(), Dtype::F64);
  return make_tensor(t.dims(), g, Dtype::F64);
}

bool Tape::has_grad(const Tensor& t) const {
  return t.on_tape() && t.tape() == this && backward_done_ &&
         !grads_[static_cast<size_t>(t.node())].empty();
}

void backward(const Tensor& scalar_output) {
  if (!scalar_output.on_tape()) fail(ErrorCode::NoTape, "backward: tensor is detached");
  scalar_output.tape()->backward(scalar_output);
}

}  // namespace ovk
