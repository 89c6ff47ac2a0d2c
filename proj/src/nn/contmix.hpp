#pragma once

#include "nn/repconv.hpp"

namespace ovk {

// Context-mixing dynamic convolution. Per-token kernels are learned linear
// aggregations (then softmax) of the token's affinities to S x S pooled
// region centers of the context prior; the first n_large groups convolve
// with k_large kernels, the rest with k_small.
struct ContMixConfig {
  int64_t channels = 0;  // C of the convolved feature map
  int64_t groups = 1;    // G
  int s = 7;             // region grid
  int k_large = 7;
  int k_small = 5;
  int n_large = 1;       // groups assigned to k_large

  int64_t large_channels() const { return channels / groups * n_large; }
  int64_t small_channels() const { return channels - large_channels(); }
  void validate() const;
};

// k_small rule: 5 when K > 5, 3 when K == 5, K otherwise; half the groups
// (rounded up) go to the large bucket.
ContMixConfig make_contmix_config(int64_t channels, int64_t groups, int s, int k_large);

struct ContMixParams {
  ConvParams w_q;      // 1x1, C_z -> C
  ConvParams w_k;      // 1x1, C_p -> C
  Tensor w_d_large;    // [S^2, k_large^2], shared across the large bucket's groups
  Tensor w_d_small;    // [S^2, k_small^2]
  DilatedRepConvParams rep;  // static path, target k_large, on C channels
};

ContMixParams make_contmix(int64_t c_z, int64_t c_p, const ContMixConfig& cfg, uint64_t seed,
                           Dtype dt);

// Per-token kernels, one row per spatial position, grouped by bucket.
struct DynamicKernels {
  Tensor large;  // [N, n_large, HW, k_large^2]
  Tensor small;  // [N, G-n_large, HW, k_small^2]; default tensor when empty
};

// Q from W_q(z_part) and K from W_k(adaptive_avg_pool(p_part, S)),
// flattened to [N,C,HW] and [N,C,S^2].
std::pair<Tensor, Tensor> compute_qk(const Tensor& z_part, const Tensor& p_part,
                                     const ContMixParams& params, const ContMixConfig& cfg);

// A[n,g,p,r] = sum over the group's channel slice of Q[n,c,p] * K[n,c,r];
// groups are contiguous channel blocks starting at channel offset c0.
Tensor group_affinity(const Tensor& q, const Tensor& k, int64_t c0, int64_t group_count,
                      int64_t channels_per_group);

// Convenience matching the per-group contract: one [N,HW,S^2] tensor per group.
std::vector<Tensor> affinities(const Tensor& q, const Tensor& k, int64_t groups);

// softmax(A W_d): rows sum to 1; each row is a flattened k x k kernel.
Tensor kernels_from_affinity(const Tensor& affinity, const Tensor& w_d);

// Depthwise application of per-token kernels: x is [N,Cb,H,W] covering
// `group_count` contiguous groups, kernels [N,group_count,HW,k^2].
Tensor dynamic_depthwise(const Tensor& x, const Tensor& kernels, int k);

DynamicKernels contmix_kernels(const Tensor& z_part, const Tensor& p_part,
                               const ContMixParams& params, const ContMixConfig& cfg);

Tensor apply_dynamic_kernels(const Tensor& x, const DynamicKernels& kernels,
                             const ContMixConfig& cfg);

// Full module: dynamic path + parallel static Dilated RepConv path.
// `dynamic_enabled=false` keeps only the static path (ERF ablation).
Tensor contmix_forward(const Tensor& z_part, const Tensor& p_part, const Tensor& x_conv,
                       const ContMixParams& params, const ContMixConfig& cfg,
                       bool dynamic_enabled = true);

}  // namespace ovk
