#include "core/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ovk {

int64_t checked_numel(const std::vector<int64_t>& dims) {
  if (dims.empty()) fail(ErrorCode::InvalidShape, "tensor must have at least one dimension");
  int64_t n = 1;
  for (int64_t d : dims) {
    if (d < 1) fail(ErrorCode::InvalidShape, "zero or negative extent in " + dims_to_string(dims));
    n *= d;
  }
  return n;
}

void quantize_to_dtype(std::vector<double>& v, Dtype dt) {
  if (dt == Dtype::F32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

Tensor make_tensor(std::vector<int64_t> dims, std::vector<double> data, Dtype dt, Tape* tape,
                   int64_t node) {
  Tensor t;
  t.dims_ = std::move(dims);
  t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
  t.dtype_ = dt;
  t.tape_ = tape;
  t.node_ = node;
  return t;
}

Tensor Tensor::zeros(std::vector<int64_t> dims, Dtype dt) {
  int64_t n = checked_numel(dims);
  return make_tensor(std::move(dims), std::vector<double>(static_cast<size_t>(n), 0.0), dt);
}

Tensor Tensor::full(std::vector<int64_t> dims, double value, Dtype dt) {
  int64_t n = checked_numel(dims);
  std::vector<double> data(static_cast<size_t>(n), value);
  quantize_to_dtype(data, dt);
  return make_tensor(std::move(dims), std::move(data), dt);
}

Tensor Tensor::from_data(std::vector<int64_t> dims, std::vector<double> data, Dtype dt) {
  int64_t n = checked_numel(dims);
  if (n != static_cast<int64_t>(data.size()))
    fail(ErrorCode::InvalidShape, "data length does not match " + dims_to_string(dims));
  quantize_to_dtype(data, dt);
  return make_tensor(std::move(dims), std::move(data), dt);
}

Tensor Tensor::seeded_uniform(std::vector<int64_t> dims, uint64_t seed, double lo, double hi,
                              Dtype dt) {
  if (!(lo < hi)) fail(ErrorCode::InvalidConfig, "seeded_uniform requires lo < hi");
  int64_t n = checked_numel(dims);
  SplitMix64 rng(seed);
  std::vector<double> data(static_cast<size_t>(n));
  for (double& x : data) x = rng.uniform(lo, hi);
  quantize_to_dtype(data, dt);
  return make_tensor(std::move(dims), std::move(data), dt);
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

int64_t Tensor::numel() const {
  if (!data_) return 0;
  return static_cast<int64_t>(data_->size());
}

double Tensor::value() const {
  if (numel() != 1) fail(ErrorCode::InvalidShape, "value() requires a 1-element tensor");
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : *data_)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string dims_to_string(const std::vector<int64_t>& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << "]";
  return os.str();
}

}  // namespace ovk
