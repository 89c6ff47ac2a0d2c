#include "core/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ovk {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    fail(ErrorCode::ShapeMismatch,
         std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
             dtype_name(b.dtype()) + ")");
}

// How the smaller operand of a binary op maps onto the full shape.
enum class BcKind { Same, Scalar, ChannelC, ChannelNC };

BcKind broadcast_kind(const std::vector<int64_t>& full, const std::vector<int64_t>& small) {
  if (full == small) return BcKind::Same;
  if (checked_numel(small) == 1) return BcKind::Scalar;
  if (full.size() == 4 && small.size() == 4 && small[2] == 1 && small[3] == 1 &&
      small[1] == full[1]) {
    if (small[0] == 1) return BcKind::ChannelC;
    if (small[0] == full[0]) return BcKind::ChannelNC;
  }
  fail(ErrorCode::ShapeMismatch, "incompatible dims " + dims_to_string(full) + " vs " +
                                     dims_to_string(small));
}

// Index of the broadcast operand element feeding full-tensor element i.
struct BcIndex {
  BcKind kind;
  int64_t C = 1, HW = 1;
  int64_t operator()(int64_t i) const {
    switch (kind) {
      case BcKind::Same: return i;
      case BcKind::Scalar: return 0;
      case BcKind::ChannelC: return (i / HW) % C;
      case BcKind::ChannelNC: return i / HW;
    }
    return 0;
  }
};

BcIndex make_bc_index(BcKind kind, const std::vector<int64_t>& full) {
  BcIndex b{kind, 1, 1};
  if (kind == BcKind::ChannelC || kind == BcKind::ChannelNC) {
    b.C = full[1];
    b.HW = full[2] * full[3];
  }
  return b;
}

// Reduces a full-shape gradient onto the broadcast operand's shape.
std::vector<double> reduce_for_broadcast(const std::vector<double>& g, const BcIndex& idx,
                                         int64_t small_numel) {
  std::vector<double> out(static_cast<size_t>(small_numel), 0.0);
  for (size_t i = 0; i < g.size(); ++i) out[static_cast<size_t>(idx(static_cast<int64_t>(i)))] += g[i];
  return out;
}

template <typename Fwd, typename MakeBwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, MakeBwd make_bwd) {
  require_same_dtype(a, b, name);
  const bool b_small = a.numel() >= b.numel();
  const Tensor& big = b_small ? a : b;
  const Tensor& small = b_small ? b : a;
  BcKind kind = broadcast_kind(big.dims(), small.dims());
  BcIndex idx = make_bc_index(kind, big.dims());

  const auto& xb = big.data();
  const auto& xs = small.data();
  std::vector<double> out(xb.size());
  if (kind == BcKind::Same) {
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = b_small ? fwd(xb[i], xs[i]) : fwd(xs[i], xb[i]);
  } else {
    for (size_t i = 0; i < out.size(); ++i) {
      double s = xs[static_cast<size_t>(idx(static_cast<int64_t>(i)))];
      out[i] = b_small ? fwd(xb[i], s) : fwd(s, xb[i]);
    }
  }
  quantize_to_dtype(out, a.dtype());

  Tape* tape = common_tape({&a, &b});
  if (!tape) return make_tensor(big.dims(), std::move(out), a.dtype());

  auto bwd = make_bwd(a, b, b_small, idx);
  std::vector<int64_t> in_nodes;
  if (a.on_tape()) in_nodes.push_back(a.node());
  if (b.on_tape()) in_nodes.push_back(b.node());
  int64_t id = tape->add_node(big.dims(), big.numel(), std::move(in_nodes), std::move(bwd));
  return make_tensor(big.dims(), std::move(out), a.dtype(), tape, id);
}

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfn) {
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  quantize_to_dtype(out, a.dtype());

  if (!a.on_tape()) return make_tensor(a.dims(), std::move(out), a.dtype());
  Tape* tape = a.tape();
  auto saved = std::make_shared<std::vector<double>>(x);
  int64_t na = a.node();
  auto bwd = [saved, na, dfn](Tape& t, const std::vector<double>& g) {
    auto& ga = t.grad_buffer(na);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfn((*saved)[i]);
  };
  int64_t id = tape->add_node(a.dims(), a.numel(), {na}, std::move(bwd));
  return make_tensor(a.dims(), std::move(out), a.dtype(), tape, id);
}

}  // namespace

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->on_tape()) continue;
    if (tape && t->tape() != tape)
      fail(ErrorCode::TapeState, "operands belong to different tapes");
    tape = t->tape();
  }
  return tape;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& a, const Tensor& b, bool, BcIndex idx) -> Tape::BackwardFn {
        int64_t na = a.on_tape() ? a.node() : -1;
        int64_t nb = b.on_tape() ? b.node() : -1;
        int64_t an = a.numel(), bn = b.numel();
        return [na, nb, an, bn, idx](Tape& t, const std::vector<double>& g) {
          auto pass = [&](int64_t node, int64_t numel) {
            if (node < 0) return;
            if (numel == static_cast<int64_t>(g.size())) {
              t.accumulate(node, g);
            } else {
              t.accumulate(node, reduce_for_broadcast(g, idx, numel));
            }
          };
          pass(na, an);
          pass(nb, bn);
        };
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& a, const Tensor& b, bool, BcIndex idx) -> Tape::BackwardFn {
        int64_t na = a.on_tape() ? a.node() : -1;
        int64_t nb = b.on_tape() ? b.node() : -1;
        int64_t an = a.numel(), bn = b.numel();
        return [na, nb, an, bn, idx](Tape& t, const std::vector<double>& g) {
          if (na >= 0) {
            if (an == static_cast<int64_t>(g.size())) {
              t.accumulate(na, g);
            } else {
              t.accumulate(na, reduce_for_broadcast(g, idx, an));
            }
          }
          if (nb >= 0) {
            std::vector<double> neg(g.size());
            for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
            if (bn == static_cast<int64_t>(g.size())) {
              t.accumulate(nb, neg);
            } else {
              t.accumulate(nb, reduce_for_broadcast(neg, idx, bn));
            }
          }
        };
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const Tensor& a, const Tensor& b, bool b_small, BcIndex idx) -> Tape::BackwardFn {
        int64_t na = a.on_tape() ? a.node() : -1;
        int64_t nb = b.on_tape() ? b.node() : -1;
        int64_t an = a.numel(), bn = b.numel();
        auto da = std::make_shared<std::vector<double>>(a.data());
        auto db = std::make_shared<std::vector<double>>(b.data());
        return [na, nb, an, bn, b_small, idx, da, db](Tape& t, const std::vector<double>& g) {
          int64_t full = static_cast<int64_t>(g.size());
          auto other_val = [&](int64_t i, const std::vector<double>& v, int64_t vn) {
            return vn == full ? v[static_cast<size_t>(i)] : v[static_cast<size_t>(idx(i))];
          };
          if (na >= 0) {
            std::vector<double> contrib(g.size());
            for (int64_t i = 0; i < full; ++i)
              contrib[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * other_val(i, *db, bn);
            if (an == full) {
              t.accumulate(na, contrib);
            } else {
              t.accumulate(na, reduce_for_broadcast(contrib, idx, an));
            }
          }
          if (nb >= 0) {
            std::vector<double> contrib(g.size());
            for (int64_t i = 0; i < full; ++i)
              contrib[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * other_val(i, *da, an);
            if (bn == full) {
              t.accumulate(nb, contrib);
            } else {
              t.accumulate(nb, reduce_for_broadcast(contrib, idx, bn));
            }
          }
          (void)b_small;
        };
      });
}

Tensor scalar_mul(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, sigmoid_scalar, [](double x) {
    double s = sigmoid_scalar(x);
    return s * (1.0 - s);
  });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, [](double x) { return x * sigmoid_scalar(x); },
                  [](double x) {
                    double s = sigmoid_scalar(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor gelu(const Tensor& a) {
  return unary_op(a, gelu_scalar, [](double x) {
    double phi_cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return phi_cdf + x * phi_pdf;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2)
    fail(ErrorCode::InvalidShape, "matmul requires rank-2 tensors");
  int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2)
    fail(ErrorCode::ShapeMismatch,
         "matmul inner dims differ: " + dims_to_string(a.dims()) + " * " + dims_to_string(b.dims()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(M * N), 0.0);
  for (int64_t i = 0; i < M; ++i)
    for (int64_t k = 0; k < K; ++k) {
      double aik = av[static_cast<size_t>(i * K + k)];
      const double* brow = &bv[static_cast<size_t>(k * N)];
      double* orow = &out[static_cast<size_t>(i * N)];
      for (int64_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  quantize_to_dtype(out, a.dtype());

  Tape* tape = common_tape({&a, &b});
  std::vector<int64_t> odims{M, N};
  if (!tape) return make_tensor(odims, std::move(out), a.dtype());

  int64_t na = a.on_tape() ? a.node() : -1;
  int64_t nb = b.on_tape() ? b.node() : -1;
  auto av_s = std::make_shared<std::vector<double>>(av);
  auto bv_s = std::make_shared<std::vector<double>>(bv);
  auto bwd = [na, nb, M, K, N, av_s, bv_s](Tape& t, const std::vector<double>& g) {
    if (na >= 0) {
      auto& ga = t.grad_buffer(na);
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
          double gij = g[static_cast<size_t>(i * N + j)];
          for (int64_t k = 0; k < K; ++k)
            ga[static_cast<size_t>(i * K + k)] += gij * (*bv_s)[static_cast<size_t>(k * N + j)];
        }
    }
    if (nb >= 0) {
      auto& gb = t.grad_buffer(nb);
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
          double gij = g[static_cast<size_t>(i * N + j)];
          for (int64_t k = 0; k < K; ++k)
            gb[static_cast<size_t>(k * N + j)] += gij * (*av_s)[static_cast<size_t>(i * K + k)];
        }
    }
  };
  std::vector<int64_t> in_nodes;
  if (na >= 0) in_nodes.push_back(na);
  if (nb >= 0) in_nodes.push_back(nb);
  int64_t id = tape->add_node(odims, M * N, std::move(in_nodes), std::move(bwd));
  return make_tensor(odims, std::move(out), a.dtype(), tape, id);
}

Tensor contract_lastdim(const Tensor& a, const Tensor& w) {
  require_same_dtype(a, w, "contract_lastdim");
  if (w.rank() != 2) fail(ErrorCode::InvalidShape, "contract_lastdim: w must be rank 2");
  int64_t R = w.dim(0), J = w.dim(1);
  if (a.dims().back() != R)
    fail(ErrorCode::ShapeMismatch, "contract_lastdim: last dim " +
                                       dims_to_string(a.dims()) + " vs w " + dims_to_string(w.dims()));
  int64_t rows = a.numel() / R;
  const auto& av = a.data();
  const auto& wv = w.data();
  std::vector<double> out(static_cast<size_t>(rows * J), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* arow = &av[static_cast<size_t>(r * R)];
    double* orow = &out[static_cast<size_t>(r * J)];
    for (int64_t k = 0; k < R; ++k) {
      double ak = arow[k];
      const double* wrow = &wv[static_cast<size_t>(k * J)];
      for (int64_t j = 0; j < J; ++j) orow[j] += ak * wrow[j];
    }
  }
  quantize_to_dtype(out, a.dtype());

  std::vector<int64_t> odims(a.dims().begin(), a.dims().end() - 1);
  odims.push_back(J);
  Tape* tape = common_tape({&a, &w});
  if (!tape) return make_tensor(odims, std::move(out), a.dtype());

  int64_t na = a.on_tape() ? a.node() : -1;
  int64_t nw = w.on_tape() ? w.node() : -1;
  auto av_s = std::make_shared<std::vector<double>>(av);
  auto wv_s = std::make_shared<std::vector<double>>(wv);
  auto bwd = [na, nw, rows, R, J, av_s, wv_s](Tape& t, const std::vector<double>& g) {
    if (na >= 0) {
      auto& ga = t.grad_buffer(na);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t k = 0; k < R; ++k) {
          double acc = 0.0;
          const double* wrow = &(*wv_s)[static_cast<size_t>(k * J)];
          const double* grow = &g[static_cast<size_t>(r * J)];
          for (int64_t j = 0; j < J; ++j) acc += grow[j] * wrow[j];
          ga[static_cast<size_t>(r * R + k)] += acc;
        }
    }
    if (nw >= 0) {
      auto& gw = t.grad_buffer(nw);
      for (int64_t r = 0; r < rows; ++r) {
        const double* arow = &(*av_s)[static_cast<size_t>(r * R)];
        const double* grow = &g[static_cast<size_t>(r * J)];
        for (int64_t k = 0; k < R; ++k)
          for (int64_t j = 0; j < J; ++j)
            gw[static_cast<size_t>(k * J + j)] += arow[k] * grow[j];
      }
    }
  };
  std::vector<int64_t> in_nodes;
  if (na >= 0) in_nodes.push_back(na);
  if (nw >= 0) in_nodes.push_back(nw);
  int64_t n = rows * J;
  int64_t id = tape->add_node(odims, n, std::move(in_nodes), std::move(bwd));
  return make_tensor(odims, std::move(out), a.dtype(), tape, id);
}

Tensor reshape(const Tensor& a, std::vector<int64_t> new_dims) {
  if (checked_numel(new_dims) != a.numel())
    fail(ErrorCode::InvalidShape, "reshape: cannot view " + dims_to_string(a.dims()) + " as " +
                                      dims_to_string(new_dims));
  if (!a.on_tape()) return make_tensor(new_dims, a.data(), a.dtype());
  Tape* tape = a.tape();
  int64_t na = a.node();
  auto bwd = [na](Tape& t, const std::vector<double>& g) { t.accumulate(na, g); };
  int64_t id = tape->add_node(new_dims, a.numel(), {na}, std::move(bwd));
  return make_tensor(std::move(new_dims), a.data(), a.dtype(), tape, id);
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::InvalidShape, "concat_channels: no inputs");
  const Tensor& p0 = parts[0];
  if (p0.rank() != 4) fail(ErrorCode::InvalidShape, "concat_channels: inputs must be NCHW");
  int64_t N = p0.dim(0), H = p0.dim(2), W = p0.dim(3);
  int64_t Ctot = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 4 || p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      fail(ErrorCode::ShapeMismatch, "concat_channels: spatial/batch dims disagree: " +
                                         dims_to_string(p0.dims()) + " vs " + dims_to_string(p.dims()));
    if (p.dtype() != p0.dtype()) fail(ErrorCode::ShapeMismatch, "concat_channels: dtype mismatch");
    Ctot += p.dim(1);
  }
  int64_t HW = H * W;
  std::vector<double> out(static_cast<size_t>(N * Ctot * HW));
  int64_t coff = 0;
  for (const Tensor& p : parts) {
    int64_t C = p.dim(1);
    const auto& v = p.data();
    for (int64_t n = 0; n < N; ++n)
      std::copy(v.begin() + n * C * HW, v.begin() + (n + 1) * C * HW,
                out.begin() + (n * Ctot + coff) * HW);
    coff += C;
  }

  std::vector<const Tensor*> ptrs;
  Tape* tape = nullptr;
  for (const Tensor& p : parts)
    if (p.on_tape()) {
      if (tape && p.tape() != tape) fail(ErrorCode::TapeState, "concat: tensors on different tapes");
      tape = p.tape();
    }
  std::vector<int64_t> odims{N, Ctot, H, W};
  if (!tape) return make_tensor(odims, std::move(out), p0.dtype());

  struct Slice {
    int64_t node, C, coff;
  };
  std::vector<Slice> slices;
  std::vector<int64_t> in_nodes;
  coff = 0;
  for (const Tensor& p : parts) {
    if (p.on_tape()) {
      slices.push_back({p.node(), p.dim(1), coff});
      in_nodes.push_back(p.node());
    }
    coff += p.dim(1);
  }
  auto bwd = [slices, N, Ctot, HW](Tape& t, const std::vector<double>& g) {
    for (const auto& s : slices) {
      auto& gp = t.grad_buffer(s.node);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < s.C * HW; ++i)
          gp[static_cast<size_t>(n * s.C * HW + i)] +=
              g[static_cast<size_t>((n * Ctot + s.coff) * HW + i)];
    }
  };
  int64_t id = tape->add_node(odims, N * Ctot * HW, std::move(in_nodes), std::move(bwd));
  return make_tensor(odims, std::move(out), p0.dtype(), tape, id);
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int64_t>& sizes) {
  if (x.rank() != 4) fail(ErrorCode::InvalidShape, "split_channels: input must be NCHW");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), HW = H * W;
  int64_t sum = 0;
  for (int64_t s : sizes) {
    if (s < 1) fail(ErrorCode::InvalidShape, "split_channels: nonpositive split size");
    sum += s;
  }
  if (sum != C)
    fail(ErrorCode::ShapeMismatch, "split_channels: sizes sum to " + std::to_string(sum) +
                                       ", C is " + std::to_string(C));
  std::vector<Tensor> outs;
  const auto& v = x.data();
  int64_t coff = 0;
  for (int64_t Cs : sizes) {
    std::vector<double> part(static_cast<size_t>(N * Cs * HW));
    for (int64_t n = 0; n < N; ++n)
      std::copy(v.begin() + (n * C + coff) * HW, v.begin() + (n * C + coff + Cs) * HW,
                part.begin() + n * Cs * HW);
    std::vector<int64_t> odims{N, Cs, H, W};
    if (!x.on_tape()) {
      outs.push_back(make_tensor(odims, std::move(part), x.dtype()));
    } else {
      Tape* tape = x.tape();
      int64_t nx = x.node();
      int64_t off = coff;
      auto bwd = [nx, N, C, Cs, HW, off](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buffer(nx);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Cs * HW; ++i)
            gx[static_cast<size_t>((n * C + off) * HW + i)] +=
                g[static_cast<size_t>(n * Cs * HW + i)];
      };
      int64_t id = tape->add_node(odims, N * Cs * HW, {nx}, std::move(bwd));
      outs.push_back(make_tensor(odims, std::move(part), x.dtype(), tape, id));
    }
    coff += Cs;
  }
  return outs;
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1) fail(ErrorCode::InvalidShape, "softmax: rank must be >= 1");
  int64_t R = a.dims().back();
  int64_t rows = a.numel() / R;
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = &x[static_cast<size_t>(r * R)];
    double* orow = &out[static_cast<size_t>(r * R)];
    double m = row[0];
    for (int64_t j = 1; j < R; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < R; ++j) {
      orow[j] = std::exp(row[j] - m);
      denom += orow[j];
    }
    for (int64_t j = 0; j < R; ++j) orow[j] /= denom;
  }
  quantize_to_dtype(out, a.dtype());

  if (!a.on_tape()) return make_tensor(a.dims(), std::move(out), a.dtype());
  Tape* tape = a.tape();
  int64_t na = a.node();
  auto y = std::make_shared<std::vector<double>>(out);
  auto bwd = [na, rows, R, y](Tape& t, const std::vector<double>& g) {
    auto& ga = t.grad_buffer(na);
    for (int64_t r = 0; r < rows; ++r) {
      const double* yr = &(*y)[static_cast<size_t>(r * R)];
      const double* gr = &g[static_cast<size_t>(r * R)];
      double dot = 0.0;
      for (int64_t j = 0; j < R; ++j) dot += yr[j] * gr[j];
      for (int64_t j = 0; j < R; ++j)
        ga[static_cast<size_t>(r * R + j)] += yr[j] * (gr[j] - dot);
    }
  };
  int64_t id = tape->add_node(a.dims(), a.numel(), {na}, std::move(bwd));
  return make_tensor(a.dims(), std::move(out), a.dtype(), tape, id);
}

Tensor sum_all(const Tensor& a) {
  const auto& x = a.data();
  double s = 0.0;
  for (double v : x) s += v;
  std::vector<double> out{s};
  quantize_to_dtype(out, a.dtype());
  if (!a.on_tape()) return make_tensor({1}, std::move(out), a.dtype());
  Tape* tape = a.tape();
  int64_t na = a.node();
  int64_t n = a.numel();
  auto bwd = [na, n](Tape& t, const std::vector<double>& g) {
    auto& ga = t.grad_buffer(na);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[0];
  };
  int64_t id = tape->add_node({1}, 1, {na}, std::move(bwd));
  return make_tensor({1}, std::move(out), a.dtype(), tape, id);
}

Tensor mean_all(const Tensor& a) { return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_same_dtype(x, weight, "linear");
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
    fail(ErrorCode::InvalidShape, "linear: expect x[N,C], weight[K,C], bias[K]");
  int64_t N = x.dim(0), C = x.dim(1), K = weight.dim(0);
  if (weight.dim(1) != C || bias.dim(0) != K)
    fail(ErrorCode::ShapeMismatch, "linear: shape mismatch");
  const auto& xv = x.data();
  const auto& wv = weight.data();
  const auto& bv = bias.data();
  std::vector<double> out(static_cast<size_t>(N * K));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k) {
      double acc = bv[static_cast<size_t>(k)];
      const double* xr = &xv[static_cast<size_t>(n * C)];
      const double* wr = &wv[static_cast<size_t>(k * C)];
      for (int64_t c = 0; c < C; ++c) acc += xr[c] * wr[c];
      out[static_cast<size_t>(n * K + k)] = acc;
    }
  quantize_to_dtype(out, x.dtype());

  Tape* tape = common_tape({&x, &weight, &bias});
  std::vector<int64_t> odims{N, K};
  if (!tape) return make_tensor(odims, std::move(out), x.dtype());
  int64_t nx = x.on_tape() ? x.node() : -1;
  int64_t nw = weight.on_tape() ? weight.node() : -1;
  int64_t nb = bias.on_tape() ? bias.node() : -1;
  auto xs = std::make_shared<std::vector<double>>(xv);
  auto ws = std::make_shared<std::vector<double>>(wv);
  auto bwd = [nx, nw, nb, N, C, K, xs, ws](Tape& t, const std::vector<double>& g) {
    if (nx >= 0) {
      auto& gx = t.grad_buffer(nx);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
          double gv = g[static_cast<size_t>(n * K + k)];
          for (int64_t c = 0; c < C; ++c)
            gx[static_cast<size_t>(n * C + c)] += gv * (*ws)[static_cast<size_t>(k * C + c)];
        }
    }
    if (nw >= 0) {
      auto& gw = t.grad_buffer(nw);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
          double gv = g[static_cast<size_t>(n * K + k)];
          for (int64_t c = 0; c < C; ++c)
            gw[static_cast<size_t>(k * C + c)] += gv * (*xs)[static_cast<size_t>(n * C + c)];
        }
    }
    if (nb >= 0) {
      auto& gb = t.grad_buffer(nb);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) gb[static_cast<size_t>(k)] += g[static_cast<size_t>(n * K + k)];
    }
  };
  std::vector<int64_t> in_nodes;
  for (int64_t v : {nx, nw, nb})
    if (v >= 0) in_nodes.push_back(v);
  int64_t id = tape->add_node(odims, N * K, std::move(in_nodes), std::move(bwd));
  return make_tensor(odims, std::move(out), x.dtype(), tape, id);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) fail(ErrorCode::InvalidShape, "cross_entropy: logits must be [N,K]");
  int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != N)
    fail(ErrorCode::ShapeMismatch, "cross_entropy: label count != batch");
  for (int lbl : labels)
    if (lbl < 0 || lbl >= K) fail(ErrorCode::InvalidConfig, "cross_entropy: label out of range");
  const auto& x = logits.data();
  double loss = 0.0;
  std::vector<double> probs(x.size());
  for (int64_t n = 0; n < N; ++n) {
    const double* row = &x[static_cast<size_t>(n * K)];
    double m = row[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
    double denom = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      probs[static_cast<size_t>(n * K + k)] = std::exp(row[k] - m);
      denom += probs[static_cast<size_t>(n * K + k)];
    }
    for (int64_t k = 0; k < K; ++k) probs[static_cast<size_t>(n * K + k)] /= denom;
    loss += std::log(denom) + m - row[labels[static_cast<size_t>(n)]];
  }
  loss /= static_cast<double>(N);
  std::vector<double> out{loss};
  quantize_to_dtype(out, logits.dtype());

  if (!logits.on_tape()) return make_tensor({1}, std::move(out), logits.dtype());
  Tape* tape = logits.tape();
  int64_t nl = logits.node();
  auto p = std::make_shared<std::vector<double>>(std::move(probs));
  auto lbl = std::make_shared<std::vector<int>>(labels);
  auto bwd = [nl, N, K, p, lbl](Tape& t, const std::vector<double>& g) {
    auto& gl = t.grad_buffer(nl);
    double scale = g[0] / static_cast<double>(N);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t k = 0; k < K; ++k) {
        double delta = (k == (*lbl)[static_cast<size_t>(n)]) ? 1.0 : 0.0;
        gl[static_cast<size_t>(n * K + k)] +=
            scale * ((*p)[static_cast<size_t>(n * K + k)] - delta);
      }
  };
  int64_t id = tape->add_node({1}, 1, {nl}, std::move(bwd));
  return make_tensor({1}, std::move(out), logits.dtype(), tape, id);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  if (eps <= 0) fail(ErrorCode::InvalidConfig, "finite_diff_grad: eps must be positive");
  std::vector<double> base = x.data();
  std::vector<double> grad(base.size());
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] = base[i] + eps;
    minus[i] = base[i] - eps;
    double fp = f(Tensor::from_data(x.dims(), std::move(plus), x.dtype()));
    double fm = f(Tensor::from_data(x.dims(), std::move(minus), x.dtype()));
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return make_tensor(x.dims(), std::move(grad), Dtype::F64);
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite())
    fail(ErrorCode::Numeric, std::string(what) + ": non-finite values encountered");
}

}  // namespace ovk
