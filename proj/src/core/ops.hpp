#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace ovk {

// Elementwise binary ops. Dims must match, or one operand may broadcast:
// a 1-element tensor broadcasts everywhere, and a [1,C,1,1] or [N,C,1,1]
// tensor broadcasts over H,W (and N for the former) against an NCHW operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);

// Elementwise activations.
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

double sigmoid_scalar(double x);
double gelu_scalar(double x);

// out[M,N] = a[M,K] * b[K,N]; fixed k-ascending accumulation order.
Tensor matmul(const Tensor& a, const Tensor& b);

// Contracts the last dimension of a [..., R] tensor with w [R, J],
// giving [..., J]. Used for the affinity-to-kernel mixing step.
Tensor contract_lastdim(const Tensor& a, const Tensor& w);

Tensor reshape(const Tensor& a, std::vector<int64_t> new_dims);

// NCHW channel concat / split. split sizes must sum to C; round trip is
// bitwise exact.
Tensor concat_channels(const std::vector<Tensor>& parts);
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int64_t>& sizes);

// Row-stable softmax over the last dimension (rank 2 = softmax over rows).
Tensor softmax_lastdim(const Tensor& a);
inline Tensor softmax_rows(const Tensor& a) { return softmax_lastdim(a); }

Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]

// y = x[N,C] * W^T[K,C] + b[K] -> [N,K]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean over rows of (logsumexp(row) - row[label]).
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

// Central differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) per element.
// f must be deterministic; the result is always f64.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps);

void check_finite(const Tensor& t, const char* what);

// Shared recording helper: the single tape behind a set of op inputs
// (nullptr when all are detached; mixing tapes is an error).
Tape* common_tape(std::initializer_list<const Tensor*> ts);

}  // namespace ovk
