#include "nn/conv.hpp"

#include <cmath>

namespace ovk {

int64_t conv_out_extent(int64_t in, int k, int stride, int padding, int dilation) {
  int64_t span = static_cast<int64_t>(dilation) * (k - 1) + 1;
  int64_t num = in + 2 * static_cast<int64_t>(padding) - span;
  if (num < 0) fail(ErrorCode::InvalidShape, "conv2d: kernel span exceeds padded input");
  return num / stride + 1;
}

ConvParams make_conv(int64_t c_in, int64_t c_out, int k, int stride, int dilation, int groups,
                     uint64_t seed, Dtype dt, bool with_bias) {
  if (groups < 1 || c_in % groups != 0 || c_out % groups != 0)
    fail(ErrorCode::InvalidConfig, "conv: channels not divisible by groups");
  int64_t fan_in = (c_in / groups) * k * k;
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  ConvParams p;
  p.weight = Tensor::seeded_uniform({c_out, c_in / groups, k, k}, seed, -bound, bound, dt);
  if (with_bias) p.bias = Tensor::zeros({c_out}, dt);
  p.stride = stride;
  p.dilation = dilation;
  p.groups = groups;
  p.padding = stride == 1 ? dilation * (k - 1) / 2 : (k - 1) / 2;
  return p;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "conv2d: input must be NCHW");
  const Tensor& w = p.weight;
  if (w.rank() != 4) fail(ErrorCode::InvalidShape, "conv2d: weight must be [Cout,Cin/g,k,k]");
  if (w.dim(2) != w.dim(3)) fail(ErrorCode::InvalidConfig, "conv2d: only square kernels");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), Cin_g = w.dim(1);
  int k = static_cast<int>(w.dim(2));
  int g = p.groups;
  if (g < 1 || C % g != 0 || Cout % g != 0 || Cin_g != C / g)
    fail(ErrorCode::InvalidConfig, "conv2d: channel/group divisibility violated");
  if (p.bias && (p.bias->rank() != 1 || p.bias->dim(0) != Cout))
    fail(ErrorCode::ShapeMismatch, "conv2d: bias must be [Cout]");
  if (x.dtype() != w.dtype()) fail(ErrorCode::ShapeMismatch, "conv2d: dtype mismatch");

  int64_t Ho = conv_out_extent(H, k, p.stride, p.padding, p.dilation);
  int64_t Wo = conv_out_extent(W, k, p.stride, p.padding, p.dilation);
  int64_t Cout_g = Cout / g;

  const auto& xv = x.data();
  const auto& wv = w.data();
  const double* bv = p.bias ? p.bias->data().data() : nullptr;
  std::vector<double> out(static_cast<size_t>(N * Cout * Ho * Wo), 0.0);

  const int stride = p.stride, pad = p.padding, dil = p.dilation;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      int64_t gi = co / Cout_g;
      double b = bv ? bv[co] : 0.0;
      for (int64_t ho = 0; ho < Ho; ++ho) {
        for (int64_t wo = 0; wo < Wo; ++wo) {
          double acc = b;
          for (int64_t cg = 0; cg < Cin_g; ++cg) {
            int64_t ci = gi * Cin_g + cg;
            const double* xc = &xv[static_cast<size_t>((n * C + ci) * H * W)];
            const double* wc = &wv[static_cast<size_t>((co * Cin_g + cg) * k * k)];
            for (int kh = 0; kh < k; ++kh) {
              int64_t hi = ho * stride - pad + static_cast<int64_t>(kh) * dil;
              if (hi < 0 || hi >= H) continue;
              for (int kw = 0; kw < k; ++kw) {
                int64_t wi = wo * stride - pad + static_cast<int64_t>(kw) * dil;
                if (wi < 0 || wi >= W) continue;
                acc += xc[hi * W + wi] * wc[kh * k + kw];
              }
            }
          }
          out[static_cast<size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)] = acc;
        }
      }
    }
  }
  quantize_to_dtype(out, x.dtype());

  std::vector<int64_t> odims{N, Cout, Ho, Wo};
  Tape* tape = p.bias ? common_tape({&x, &w, &*p.bias}) : common_tape({&x, &w});
  if (!tape) return make_tensor(odims, std::move(out), x.dtype());

  int64_t nx = x.on_tape() ? x.node() : -1;
  int64_t nw = w.on_tape() ? w.node() : -1;
  int64_t nb = (p.bias && p.bias->on_tape()) ? p.bias->node() : -1;
  auto xs = std::make_shared<std::vector<double>>(xv);
  auto ws = std::make_shared<std::vector<double>>(wv);
  auto bwd = [=](Tape& t, const std::vector<double>& gout) {
    std::vector<double>* gx = nx >= 0 ? &t.grad_buffer(nx) : nullptr;
    std::vector<double>* gw = nw >= 0 ? &t.grad_buffer(nw) : nullptr;
    std::vector<double>* gb = nb >= 0 ? &t.grad_buffer(nb) : nullptr;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t co = 0; co < Cout; ++co) {
        int64_t gi = co / Cout_g;
        for (int64_t ho = 0; ho < Ho; ++ho) {
          for (int64_t wo = 0; wo < Wo; ++wo) {
            double gv = gout[static_cast<size_t>(((n * Cout + co) * Ho + ho) * Wo + wo)];
            if (gv == 0.0) continue;
            if (gb) (*gb)[static_cast<size_t>(co)] += gv;
            for (int64_t cg = 0; cg < Cin_g; ++cg) {
              int64_t ci = gi * Cin_g + cg;
              const double* xc = &(*xs)[static_cast<size_t>((n * C + ci) * H * W)];
              const double* wc = &(*ws)[static_cast<size_t>((co * Cin_g + cg) * k * k)];
              double* gxc = gx ? &(*gx)[static_cast<size_t>((n * C + ci) * H * W)] : nullptr;
              double* gwc = gw ? &(*gw)[static_cast<size_t>((co * Cin_g + cg) * k * k)] : nullptr;
              for (int kh = 0; kh < k; ++kh) {
                int64_t hi = ho * stride - pad + static_cast<int64_t>(kh) * dil;
                if (hi < 0 || hi >= H) continue;
                for (int kw = 0; kw < k; ++kw) {
                  int64_t wi = wo * stride - pad + static_cast<int64_t>(kw) * dil;
                  if (wi < 0 || wi >= W) continue;
                  if (gxc) gxc[hi * W + wi] += gv * wc[kh * k + kw];
                  if (gwc) gwc[kh * k + kw] += gv * xc[hi * W + wi];
                }
              }
            }
          }
        }
      }
    }
  };
  std::vector<int64_t> in_nodes;
  for (int64_t v : {nx, nw, nb})
    if (v >= 0) in_nodes.push_back(v);
  int64_t id = tape->add_node(odims, N * Cout * Ho * Wo, std::move(in_nodes), std::move(bwd));
  return make_tensor(odims, std::move(out), x.dtype(), tape, id);
}

}  // namespace ovk
