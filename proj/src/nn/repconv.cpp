#include "nn/repconv.hpp"

namespace ovk {

std::vector<std::pair<int, int>> repconv_branch_plan(int K) {
  if (K % 2 == 0 || K < 3) fail(ErrorCode::InvalidConfig, "repconv: target kernel must be odd >= 3");
  if (K == 3) return {{3, 1}};
  if (K == 5) return {{5, 1}, {3, 2}};
  return {{K, 1}, {5, 1}, {3, (K - 1) / 2}};
}

static void check_branches(const DilatedRepConvParams& p) {
  if (p.target_kernel % 2 == 0)
    fail(ErrorCode::InvalidConfig, "repconv: even target kernel");
  int64_t C = p.channels();
  for (const auto& b : p.branches) {
    int span = b.dilation * (b.kernel - 1) + 1;
    if (span > p.target_kernel)
      fail(ErrorCode::InvalidConfig, "repconv: branch span " + std::to_string(span) +
                                         " exceeds target " + std::to_string(p.target_kernel));
    if (b.weight.rank() != 4 || b.weight.dim(0) != C || b.weight.dim(1) != 1 ||
        b.weight.dim(2) != b.kernel || b.weight.dim(3) != b.kernel)
      fail(ErrorCode::ShapeMismatch, "repconv: branch weight shape invalid");
  }
}

DilatedRepConvParams make_repconv(int64_t channels, int target_kernel, uint64_t seed, Dtype dt) {
  DilatedRepConvParams p;
  p.target_kernel = target_kernel;
  auto plan = repconv_branch_plan(target_kernel);
  int idx = 0;
  for (auto [k, d] : plan) {
    DilatedRepConvParams::Branch b;
    b.kernel = k;
    b.dilation = d;
    double bound = 1.0 / std::sqrt(static_cast<double>(k) * k);
    b.weight = Tensor::seeded_uniform({channels, 1, k, k}, mix_seed(seed, static_cast<uint64_t>(idx)),
                                      -bound, bound, dt);
    p.branches.push_back(std::move(b));
    ++idx;
  }
  p.bias = Tensor::zeros({channels}, dt);
  return p;
}

Tensor dilated_repconv_forward(const Tensor& x, const DilatedRepConvParams& p) {
  check_branches(p);
  int64_t C = x.dim(1);
  if (C != p.channels()) fail(ErrorCode::ShapeMismatch, "repconv: channel mismatch");
  Tensor acc;
  bool first = true;
  for (const auto& b : p.branches) {
    ConvParams cp;
    cp.weight = b.weight;
    cp.stride = 1;
    cp.dilation = b.dilation;
    cp.groups = static_cast<int>(C);
    cp.padding = b.dilation * (b.kernel - 1) / 2;
    Tensor y = conv2d(x, cp);
    acc = first ? y : add(acc, y);
    first = false;
  }
  // broadcast the shared bias over N,H,W
  Tensor b4 = reshape(p.bias, {1, C, 1, 1});
  return add(acc, b4);
}

ConvParams dilated_repconv_fuse(const DilatedRepConvParams& p) {
  check_branches(p);
  int K = p.target_kernel;
  int64_t C = p.channels();
  std::vector<double> dense(static_cast<size_t>(C * K * K), 0.0);
  for (const auto& b : p.branches) {
    int k = b.kernel, d = b.dilation;
    int span = d * (k - 1) + 1;
    int off = (K - span) / 2;
    const auto& w = b.weight.data();
    for (int64_t c = 0; c < C; ++c)
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
          dense[static_cast<size_t>(c * K * K + (off + i * d) * K + (off + j * d))] +=
              w[static_cast<size_t>(c * k * k + i * k + j)];
  }
  ConvParams fused;
  fused.weight = Tensor::from_data({C, 1, K, K}, std::move(dense), p.bias.dtype());
  fused.bias = p.bias.detached();
  fused.stride = 1;
  fused.dilation = 1;
  fused.groups = static_cast<int>(C);
  fused.padding = (K - 1) / 2;
  return fused;
}

}  // namespace ovk
