#pragma once

#include <optional>

#include "core/ops.hpp"

namespace ovk {

// Cross-correlation with zero padding, the standard convnet convention.
// weight is [C_out, C_in/groups, k, k]; stride/padding/dilation are
// symmetric in H and W. Stride-1 layers use same-padding = dilation*(k-1)/2
// (odd k), so spatial dims are preserved.
struct ConvParams {
  Tensor weight;
  std::optional<Tensor> bias;  // [C_out]
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;

  int64_t out_channels() const { return weight.dim(0); }
  int64_t in_channels() const { return weight.dim(1) * groups; }
  int64_t kernel() const { return weight.dim(2); }
};

// Builds a ConvParams with fan-in uniform init (zeros bias), same-padding
// when stride==1.
ConvParams make_conv(int64_t c_in, int64_t c_out, int k, int stride, int dilation, int groups,
                     uint64_t seed, Dtype dt, bool with_bias = true);
inline ConvParams make_conv1x1(int64_t c_in, int64_t c_out, uint64_t seed, Dtype dt) {
  return make_conv(c_in, c_out, 1, 1, 1, 1, seed, dt);
}

int64_t conv_out_extent(int64_t in, int k, int stride, int padding, int dilation);

Tensor conv2d(const Tensor& x, const ConvParams& p);

}  // namespace ovk
