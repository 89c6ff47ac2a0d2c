#include "nn/layers.hpp"

#include <cmath>

namespace ovk {

LayerNormParams make_layer_norm(int64_t channels, Dtype dt, double eps) {
  if (eps <= 0) fail(ErrorCode::InvalidConfig, "layer_norm: eps must be positive");
  LayerNormParams p;
  p.gamma = Tensor::full({channels}, 1.0, dt);
  p.beta = Tensor::zeros({channels}, dt);
  p.eps = eps;
  return p;
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "layer_norm: input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), HW = H * W;
  if (p.gamma.dim(0) != C || p.beta.dim(0) != C)
    fail(ErrorCode::ShapeMismatch, "layer_norm: gamma/beta length != C");
  const auto& xv = x.data();
  const auto& gv = p.gamma.data();
  const auto& bv = p.beta.data();
  const double eps = p.eps;

  std::vector<double> out(xv.size());
  // saved normalized values and inverse stds, for backward
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(N * HW));

  for (int64_t n = 0; n < N; ++n) {
    for (int64_t q = 0; q < HW; ++q) {
      double mean = 0.0;
      for (int64_t c = 0; c < C; ++c) mean += xv[static_cast<size_t>((n * C + c) * HW + q)];
      mean /= static_cast<double>(C);
      double var = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double d = xv[static_cast<size_t>((n * C + c) * HW + q)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(C);
      double is = 1.0 / std::sqrt(var + eps);
      (*istd)[static_cast<size_t>(n * HW + q)] = is;
      for (int64_t c = 0; c < C; ++c) {
        size_t i = static_cast<size_t>((n * C + c) * HW + q);
        double xh = (xv[i] - mean) * is;
        (*xhat)[i] = xh;
        out[i] = gv[static_cast<size_t>(c)] * xh + bv[static_cast<size_t>(c)];
      }
    }
  }
  quantize_to_dtype(out, x.dtype());

  Tape* tape = common_tape({&x, &p.gamma, &p.beta});
  if (!tape) return make_tensor(x.dims(), std::move(out), x.dtype());
  int64_t nx = x.on_tape() ? x.node() : -1;
  int64_t ng = p.gamma.on_tape() ? p.gamma.node() : -1;
  int64_t nb = p.beta.on_tape() ? p.beta.node() : -1;
  auto gamma = std::make_shared<std::vector<double>>(gv);
  auto bwd = [nx, ng, nb, N, C, HW, xhat, istd, gamma](Tape& t, const std::vector<double>& g) {
    std::vector<double>* gx = nx >= 0 ? &t.grad_buffer(nx) : nullptr;
    std::vector<double>* gg = ng >= 0 ? &t.grad_buffer(ng) : nullptr;
    std::vector<double>* gb = nb >= 0 ? &t.grad_buffer(nb) : nullptr;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t q = 0; q < HW; ++q) {
        double is = (*istd)[static_cast<size_t>(n * HW + q)];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          size_t i = static_cast<size_t>((n * C + c) * HW + q);
          double dxh = g[i] * (*gamma)[static_cast<size_t>(c)];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * (*xhat)[i];
          if (gg) (*gg)[static_cast<size_t>(c)] += g[i] * (*xhat)[i];
          if (gb) (*gb)[static_cast<size_t>(c)] += g[i];
        }
        if (gx) {
          double invC = 1.0 / static_cast<double>(C);
          for (int64_t c = 0; c < C; ++c) {
            size_t i = static_cast<size_t>((n * C + c) * HW + q);
            double dxh = g[i] * (*gamma)[static_cast<size_t>(c)];
            (*gx)[i] += is * (dxh - invC * sum_dxhat - (*xhat)[i] * invC * sum_dxhat_xhat);
          }
        }
      }
    }
  };
  std::vector<int64_t> in_nodes;
  for (int64_t v : {nx, ng, nb})
    if (v >= 0) in_nodes.push_back(v);
  int64_t id = tape->add_node(x.dims(), x.numel(), std::move(in_nodes), std::move(bwd));
  return make_tensor(x.dims(), std::move(out), x.dtype(), tape, id);
}

SEParams make_se(int64_t channels, int reduction, uint64_t seed, Dtype dt) {
  int64_t mid = channels / reduction;
  if (mid < 1) fail(ErrorCode::InvalidConfig, "se: C/r must be >= 1");
  SEParams p;
  p.reduce = make_conv1x1(channels, mid, mix_seed(seed, 0), dt);
  p.expand = make_conv1x1(mid, channels, mix_seed(seed, 1), dt);
  return p;
}

Tensor se_forward(const Tensor& x, const SEParams& p) {
  Tensor s = global_avg_pool(x);
  s = conv2d(s, p.reduce);
  s = relu(s);
  s = conv2d(s, p.expand);
  s = sigmoid(s);
  return mul(x, s);  // s is [N,C,1,1], broadcast over H,W
}

ConvFFNParams make_convffn(int64_t channels, double expansion, uint64_t seed, Dtype dt) {
  if (expansion < 1.0) fail(ErrorCode::InvalidConfig, "convffn: expansion must be >= 1");
  int64_t hidden = static_cast<int64_t>(static_cast<double>(channels) * expansion);
  ConvFFNParams p;
  p.expand_proj = make_conv1x1(channels, hidden, mix_seed(seed, 0), dt);
  p.dw = make_conv(hidden, hidden, 3, 1, 1, static_cast<int>(hidden), mix_seed(seed, 1), dt);
  p.contract_proj = make_conv1x1(hidden, channels, mix_seed(seed, 2), dt);
  return p;
}

Tensor convffn_forward(const Tensor& x, const ConvFFNParams& p) {
  Tensor y = conv2d(x, p.expand_proj);
  y = conv2d(y, p.dw);
  y = gelu(y);
  return conv2d(y, p.contract_proj);
}

Tensor adaptive_avg_pool(const Tensor& x, int64_t s) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "adaptive_avg_pool: input must be NCHW");
  if (s < 1) fail(ErrorCode::InvalidConfig, "adaptive_avg_pool: S must be >= 1");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(N * C * s * s), 0.0);
  auto lo = [](int64_t i, int64_t in, int64_t s) { return (i * in) / s; };
  auto hi = [](int64_t i, int64_t in, int64_t s) { return ((i + 1) * in + s - 1) / s; };
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* xc = &xv[static_cast<size_t>((n * C + c) * H * W)];
      for (int64_t i = 0; i < s; ++i) {
        int64_t h0 = lo(i, H, s), h1 = hi(i, H, s);
        for (int64_t j = 0; j < s; ++j) {
          int64_t w0 = lo(j, W, s), w1 = hi(j, W, s);
          double acc = 0.0;
          for (int64_t h = h0; h < h1; ++h)
            for (int64_t w = w0; w < w1; ++w) acc += xc[h * W + w];
          out[static_cast<size_t>(((n * C + c) * s + i) * s + j)] =
              acc / static_cast<double>((h1 - h0) * (w1 - w0));
        }
      }
    }
  quantize_to_dtype(out, x.dtype());

  std::vector<int64_t> odims{N, C, s, s};
  if (!x.on_tape()) return make_tensor(odims, std::move(out), x.dtype());
  Tape* tape = x.tape();
  int64_t nx = x.node();
  auto bwd = [nx, N, C, H, W, s, lo, hi](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad_buffer(nx);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double* gxc = &gx[static_cast<size_t>((n * C + c) * H * W)];
        for (int64_t i = 0; i < s; ++i) {
          int64_t h0 = lo(i, H, s), h1 = hi(i, H, s);
          for (int64_t j = 0; j < s; ++j) {
            int64_t w0 = lo(j, W, s), w1 = hi(j, W, s);
            double gv = g[static_cast<size_t>(((n * C + c) * s + i) * s + j)] /
                        static_cast<double>((h1 - h0) * (w1 - w0));
            for (int64_t h = h0; h < h1; ++h)
              for (int64_t w = w0; w < w1; ++w) gxc[h * W + w] += gv;
          }
        }
      }
  };
  int64_t id = tape->add_node(odims, N * C * s * s, {nx}, std::move(bwd));
  return make_tensor(odims, std::move(out), x.dtype(), tape, id);
}

namespace {
// source coordinate and blend weights for one upsampled index
struct Blend {
  int64_t i0, i1;
  double w0, w1;
};
Blend blend_for(int64_t i, int64_t in) {
  double src = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
  if (src < 0) src = 0;
  if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
  int64_t i0 = static_cast<int64_t>(std::floor(src));
  int64_t i1 = std::min(i0 + 1, in - 1);
  double f = src - static_cast<double>(i0);
  return {i0, i1, 1.0 - f, f};
}
}  // namespace

Tensor upsample_bilinear_x2(const Tensor& x) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "upsample: input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = 2 * H, Wo = 2 * W;
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(N * C * Ho * Wo));
  std::vector<Blend> bh(static_cast<size_t>(Ho)), bw(static_cast<size_t>(Wo));
  for (int64_t i = 0; i < Ho; ++i) bh[static_cast<size_t>(i)] = blend_for(i, H);
  for (int64_t j = 0; j < Wo; ++j) bw[static_cast<size_t>(j)] = blend_for(j, W);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* xc = &xv[static_cast<size_t>(nc * H * W)];
    double* oc = &out[static_cast<size_t>(nc * Ho * Wo)];
    for (int64_t i = 0; i < Ho; ++i) {
      const Blend& h = bh[static_cast<size_t>(i)];
      for (int64_t j = 0; j < Wo; ++j) {
        const Blend& w = bw[static_cast<size_t>(j)];
        oc[i * Wo + j] = h.w0 * (w.w0 * xc[h.i0 * W + w.i0] + w.w1 * xc[h.i0 * W + w.i1]) +
                         h.w1 * (w.w0 * xc[h.i1 * W + w.i0] + w.w1 * xc[h.i1 * W + w.i1]);
      }
    }
  }
  quantize_to_dtype(out, x.dtype());

  std::vector<int64_t> odims{N, C, Ho, Wo};
  if (!x.on_tape()) return make_tensor(odims, std::move(out), x.dtype());
  Tape* tape = x.tape();
  int64_t nx = x.node();
  auto bwd = [nx, N, C, H, W, Ho, Wo, bh, bw](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad_buffer(nx);
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double* gxc = &gx[static_cast<size_t>(nc * H * W)];
      const double* gc = &g[static_cast<size_t>(nc * Ho * Wo)];
      for (int64_t i = 0; i < Ho; ++i) {
        const Blend& h = bh[static_cast<size_t>(i)];
        for (int64_t j = 0; j < Wo; ++j) {
          const Blend& w = bw[static_cast<size_t>(j)];
          double gv = gc[i * Wo + j];
          gxc[h.i0 * W + w.i0] += gv * h.w0 * w.w0;
          gxc[h.i0 * W + w.i1] += gv * h.w0 * w.w1;
          gxc[h.i1 * W + w.i0] += gv * h.w1 * w.w0;
          gxc[h.i1 * W + w.i1] += gv * h.w1 * w.w1;
        }
      }
    }
  };
  int64_t id = tape->add_node(odims, N * C * Ho * Wo, {nx}, std::move(bwd));
  return make_tensor(odims, std::move(out), x.dtype(), tape, id);
}

Tensor avg_pool_2x2(const Tensor& x) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "avg_pool_2x2: input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) fail(ErrorCode::InvalidShape, "avg_pool_2x2: odd spatial dims");
  int64_t Ho = H / 2, Wo = W / 2;
  const auto& xv = x.data();
  std::vector<double> out(static_cast<size_t>(N * C * Ho * Wo));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* xc = &xv[static_cast<size_t>(nc * H * W)];
    double* oc = &out[static_cast<size_t>(nc * Ho * Wo)];
    for (int64_t i = 0; i < Ho; ++i)
      for (int64_t j = 0; j < Wo; ++j)
        oc[i * Wo + j] = 0.25 * (xc[(2 * i) * W + 2 * j] + xc[(2 * i) * W + 2 * j + 1] +
                                 xc[(2 * i + 1) * W + 2 * j] + xc[(2 * i + 1) * W + 2 * j + 1]);
  }
  quantize_to_dtype(out, x.dtype());

  std::vector<int64_t> odims{N, C, Ho, Wo};
  if (!x.on_tape()) return make_tensor(odims, std::move(out), x.dtype());
  Tape* tape = x.tape();
  int64_t nx = x.node();
  auto bwd = [nx, N, C, H, W, Ho, Wo](Tape& t, const std::vector<double>& g) {
    auto& gx = t.grad_buffer(nx);
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double* gxc = &gx[static_cast<size_t>(nc * H * W)];
      const double* gc = &g[static_cast<size_t>(nc * Ho * Wo)];
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
          double gv = 0.25 * gc[i * Wo + j];
          gxc[(2 * i) * W + 2 * j] += gv;
          gxc[(2 * i) * W + 2 * j + 1] += gv;
          gxc[(2 * i + 1) * W + 2 * j] += gv;
          gxc[(2 * i + 1) * W + 2 * j + 1] += gv;
        }
    }
  };
  int64_t id = tape->add_node(odims, N * C * Ho * Wo, {nx}, std::move(bwd));
  return make_tensor(odims, std::move(out), x.dtype(), tape, id);
}

EmbedParams make_embed(int64_t c_in, int64_t c_out, uint64_t seed, Dtype dt) {
  EmbedParams p;
  p.conv = make_conv(c_in, c_out, 3, 2, 1, 1, mix_seed(seed, 0), dt);
  p.norm = make_layer_norm(c_out, dt);
  return p;
}

Tensor embed_downsample(const Tensor& x, const EmbedParams& p) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    fail(ErrorCode::InvalidShape, "embed_downsample: odd spatial dims");
  return layer_norm(conv2d(x, p.conv), p.norm);
}

HeadParams make_head(int64_t channels, int64_t num_classes, uint64_t seed, Dtype dt) {
  HeadParams p;
  p.norm = make_layer_norm(channels, dt);
  double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  p.weight = Tensor::seeded_uniform({num_classes, channels}, mix_seed(seed, 0), -bound, bound, dt);
  p.bias = Tensor::zeros({num_classes}, dt);
  return p;
}

Tensor head_forward(const Tensor& x, const HeadParams& p) {
  Tensor y = layer_norm(x, p.norm);
  y = global_avg_pool(y);                    // [N,C,1,1]
  y = reshape(y, {x.dim(0), x.dim(1)});      // [N,C]
  return linear(y, p.weight, p.bias);
}

}  // namespace ovk
