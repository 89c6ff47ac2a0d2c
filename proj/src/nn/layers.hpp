#pragma once

#include "nn/conv.hpp"

namespace ovk {

// Channel-wise LayerNorm: normalizes the C channels at each (n,h,w)
// location to zero mean / unit variance, then scales and shifts.
struct LayerNormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  double eps = 1e-6;
};

LayerNormParams make_layer_norm(int64_t channels, Dtype dt, double eps = 1e-6);
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

// Squeeze-and-excitation: x * sigmoid(expand(relu(reduce(GAP(x))))).
struct SEParams {
  ConvParams reduce;  // 1x1 C -> C/r
  ConvParams expand;  // 1x1 C/r -> C
};

SEParams make_se(int64_t channels, int reduction, uint64_t seed, Dtype dt);
Tensor se_forward(const Tensor& x, const SEParams& p);

// 1x1 expand -> 3x3 depthwise -> GELU -> 1x1 contract. The residual lives
// in the enclosing block.
struct ConvFFNParams {
  ConvParams expand_proj;
  ConvParams dw;
  ConvParams contract_proj;
};

ConvFFNParams make_convffn(int64_t channels, double expansion, uint64_t seed, Dtype dt);
Tensor convffn_forward(const Tensor& x, const ConvFFNParams& p);

// Adaptive average pooling to an S x S grid. Window (i,j) covers
// [floor(i*H/S), ceil((i+1)*H/S)) x [floor(j*W/S), ceil((j+1)*W/S)).
// Well defined for any S >= 1, including S > H (overlapping windows).
Tensor adaptive_avg_pool(const Tensor& x, int64_t s);
inline Tensor global_avg_pool(const Tensor& x) { return adaptive_avg_pool(x, 1); }

// Bilinear x2 upsampling, align-corners-false.
Tensor upsample_bilinear_x2(const Tensor& x);

// 2x2 stride-2 average pooling (even H, W).
Tensor avg_pool_2x2(const Tensor& x);

// Stride-2 3x3 conv + channel LayerNorm; halves H and W (even extents).
struct EmbedParams {
  ConvParams conv;
  LayerNormParams norm;
};

EmbedParams make_embed(int64_t c_in, int64_t c_out, uint64_t seed, Dtype dt);
Tensor embed_downsample(const Tensor& x, const EmbedParams& p);

// LayerNorm -> global average pool -> affine map to class logits.
struct HeadParams {
  LayerNormParams norm;
  Tensor weight;  // [num_classes, C]
  Tensor bias;    // [num_classes]
};

HeadParams make_head(int64_t channels, int64_t num_classes, uint64_t seed, Dtype dt);
Tensor head_forward(const Tensor& x, const HeadParams& p);

}  // namespace ovk
