#pragma once

#include <vector>

#include "nn/conv.hpp"

namespace ovk {

// Multi-branch depthwise convolution: parallel (kernel, dilation) branches,
// each same-padded, summed, plus one shared bias. Fusable into a single
// dense K x K depthwise kernel with identical outputs.
struct DilatedRepConvParams {
  struct Branch {
    int kernel = 3;
    int dilation = 1;
    Tensor weight;  // [C,1,k,k] depthwise
  };
  int target_kernel = 3;  // K
  std::vector<Branch> branches;
  Tensor bias;  // [C]

  int64_t channels() const { return bias.dim(0); }
};

// Branch layout: {(K,1),(5,1),(3,(K-1)/2)} for K>5, {(5,1),(3,2)} for K==5,
// {(3,1)} for K==3. Every branch span dilation*(k-1)+1 stays <= K.
std::vector<std::pair<int, int>> repconv_branch_plan(int target_kernel);

DilatedRepConvParams make_repconv(int64_t channels, int target_kernel, uint64_t seed, Dtype dt);

Tensor dilated_repconv_forward(const Tensor& x, const DilatedRepConvParams& p);

// Scatters every branch into one dense K x K depthwise kernel (stride =
// dilation, centered) and sums. forward(fused) == forward(multi-branch).
ConvParams dilated_repconv_fuse(const DilatedRepConvParams& p);

}  // namespace ovk
