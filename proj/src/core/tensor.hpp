#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "core/common.hpp"

namespace ovk {

class Tape;

// Dense row-major tensor (last dimension fastest). 4-D tensors follow NCHW
// order by convention. Values are stored as doubles; in F32 mode every
// operation rounds its result through float, so an F32 tensor always holds
// exact float values.
//
// Tensors are immutable values once built. A tensor may be bound to a Tape
// (via Tape::leaf or by being the output of an op on tape inputs), which is
// what makes it differentiable.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> dims, Dtype dt = Dtype::F64);
  static Tensor full(std::vector<int64_t> dims, double value, Dtype dt = Dtype::F64);
  static Tensor from_data(std::vector<int64_t> dims, std::vector<double> data,
                          Dtype dt = Dtype::F64);
  // Deterministic: same (dims, seed, lo, hi) gives identical bits. Elements
  // are drawn in row-major order from SplitMix64(seed).
  static Tensor seeded_uniform(std::vector<int64_t> dims, uint64_t seed, double lo, double hi,
                               Dtype dt = Dtype::F64);
  static Tensor scalar(double value, Dtype dt = Dtype::F64);

  const std::vector<int64_t>& dims() const { return dims_; }
  int64_t dim(size_t i) const { return dims_.at(i); }
  size_t rank() const { return dims_.size(); }
  int64_t numel() const;
  Dtype dtype() const { return dtype_; }

  const std::vector<double>& data() const { return *data_; }
  double at(int64_t i) const { return (*data_)[i]; }
  double value() const;  // requires numel()==1

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int64_t node() const { return node_; }
  // A copy of this tensor with no tape attachment.
  Tensor detached() const;

  bool same_dims(const Tensor& other) const { return dims_ == other.dims_; }
  bool all_finite() const;

 private:
  std::shared_ptr<const std::vector<double>> data_;
  std::vector<int64_t> dims_;
  Dtype dtype_ = Dtype::F64;
  Tape* tape_ = nullptr;
  int64_t node_ = -1;

  friend class Tape;
  friend Tensor make_tensor(std::vector<int64_t> dims, std::vector<double> data, Dtype dt,
                            Tape* tape, int64_t node);
};

int64_t checked_numel(const std::vector<int64_t>& dims);

// Rounds every element through float when dt is F32 (no-op for F64).
void quantize_to_dtype(std::vector<double>& v, Dtype dt);

// Internal constructor used by ops.
Tensor make_tensor(std::vector<int64_t> dims, std::vector<double> data, Dtype dt,
                   Tape* tape = nullptr, int64_t node = -1);

std::string dims_to_string(const std::vector<int64_t>& dims);

}  // namespace ovk
