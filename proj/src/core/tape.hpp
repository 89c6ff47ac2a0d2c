#pragma once

#include <functional>
#include <span>
#include <vector>

#include "core/tensor.hpp"

namespace ovk {

// Reverse-mode differentiation tape. Nodes are appended in execution order
// (so inputs always precede their consumers); backward() walks them in
// reverse, handing each node its accumulated output gradient.
//
// The tape is single-threaded per forward/backward episode. Gradients are
// always accumulated in f64 regardless of the traced tensors' dtype.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a value as a leaf and returns the tape-bound tensor (shares
  // the value's storage). Parameter leaves are guaranteed a gradient after
  // backward(), zero if unreachable.
  Tensor leaf(const Tensor& value, bool is_param = false);

  // Recording hook used by ops. Returns the node id of the new output.
  int64_t add_node(const std::vector<int64_t>& out_dims, int64_t out_numel,
                   std::vector<int64_t> inputs, BackwardFn bwd);

  // Accumulates a gradient contribution into a node (used by BackwardFns).
  void accumulate(int64_t node, const std::vector<double>& contribution);
  void accumulate_at(int64_t node, int64_t offset, double value);
  // Ensures the accumulator for `node` exists and returns it for in-place
  // scatter operations.
  std::vector<double>& grad_buffer(int64_t node);

  // Runs reverse-mode accumulation from a scalar output on this tape.
  // Calling it twice without reset() is an error.
  void backward(const Tensor& scalar_output);

  bool backward_done() const { return backward_done_; }
  void reset();

  // Gradient of a tape-bound tensor after backward(); same dims, dtype f64.
  Tensor grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const;

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int64_t> dims;
    int64_t numel = 0;
    std::vector<int64_t> inputs;
    BackwardFn bwd;  // null for leaves
    bool is_param = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool backward_done_ = false;
};

// Convenience: backward() on the tensor's own tape.
void backward(const Tensor& scalar_output);

}  // namespace ovk
