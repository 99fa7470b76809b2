#include "rl4seg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace rl4seg::ad {

namespace {

thread_local bool g_grad_enabled = true;

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedMapRM = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStridedMapRM = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool track = g_grad_enabled;
  if (track) {
    track = false;
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}

// ---------------------------------------------------------------------------
// Broadcasting

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    require(da == db || da == 1 || db == 1,
            "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast axes, aligned to `out` from the right.
std::vector<int64_t> broadcast_strides(const std::vector<int>& shape, const std::vector<int>& out) {
  std::vector<int64_t> strides(out.size(), 0);
  int64_t s = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t ax = shape.size() - 1 - i;
    size_t oax = out.size() - 1 - i;
    strides[oax] = (shape[ax] == 1 && out[oax] != 1) ? 0 : s;
    s *= shape[ax];
  }
  return strides;
}

// Applies fn(out_i, a_i, b_i) over the broadcasted index space.
template <class Fn>
void for_each_broadcast(const std::vector<int>& out_shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  int64_t n = Tensor::count(out_shape);
  size_t r = out_shape.size();
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (size_t ax = r; ax-- > 0;) {
      idx[ax]++;
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out_shape[ax]) break;
      ia -= int64_t(idx[ax]) * sa[ax];
      ib -= int64_t(idx[ax]) * sb[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Var binary_op(const Var& a, const Var& b, BinOp op) {
  require(a && b, "binary op: null operand");
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  Tensor out;
  bool same = av.shape == bv.shape;
  if (same) {
    out = Tensor(av.shape);
    const int64_t n = av.numel();
    switch (op) {
      case BinOp::Add:
        for (int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
        break;
      case BinOp::Sub:
        for (int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
        break;
      case BinOp::Mul:
        for (int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else {
    auto os = broadcast_shape(av.shape, bv.shape);
    auto sa = broadcast_strides(av.shape, os);
    auto sb = broadcast_strides(bv.shape, os);
    out = Tensor(os);
    switch (op) {
      case BinOp::Add:
        for_each_broadcast(os, sa, sb,
                           [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] + bv[ib]; });
        break;
      case BinOp::Sub:
        for_each_broadcast(os, sa, sb,
                           [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] - bv[ib]; });
        break;
      case BinOp::Mul:
        for_each_broadcast(os, sa, sb,
                           [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] * bv[ib]; });
        break;
    }
  }
  return make_node(std::move(out), {a, b}, [a, b, op, same](Node& node) {
    const Tensor& g = node.grad;
    auto accumulate = [&](const Var& target, bool is_a) {
      if (!target->requires_grad) return;
      target->ensure_grad();
      Tensor& tg = target->grad;
      const int64_t n = g.numel();
      if (same) {
        if (op == BinOp::Mul) {
          const Tensor& other = is_a ? b->value : a->value;
          for (int64_t i = 0; i < n; ++i) tg[i] += g[i] * other[i];
        } else if (op == BinOp::Sub && !is_a) {
          for (int64_t i = 0; i < n; ++i) tg[i] -= g[i];
        } else {
          for (int64_t i = 0; i < n; ++i) tg[i] += g[i];
        }
        return;
      }
      auto os = node.value.shape;
      auto sa = broadcast_strides(a->value.shape, os);
      auto sb = broadcast_strides(b->value.shape, os);
      const Tensor& other = is_a ? b->value : a->value;
      for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        int64_t it = is_a ? ia : ib;
        int64_t io = is_a ? ib : ia;
        real gv = g[i];
        if (op == BinOp::Mul) gv *= other[io];
        if (op == BinOp::Sub && !is_a) gv = -gv;
        tg[it] += gv;
      });
    };
    accumulate(a, true);
    accumulate(b, false);
  });
}

// ---------------------------------------------------------------------------
// conv3d via per-time-slice im2col + GEMM

struct ConvDims {
  int ci, t, h, w;
  int co, kt, kh, kw;
  int to, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int padding) {
  require(x.rank() == 4, "conv3d: input must be [C,T,H,W], got " + shape_str(x.shape));
  require(wt.rank() == 5, "conv3d: weights must be [Co,Ci,kt,kh,kw], got " + shape_str(wt.shape));
  require(stride >= 1, "conv3d: stride must be >= 1");
  require(padding >= 0, "conv3d: padding must be >= 0");
  ConvDims d;
  d.ci = x.dim(0);
  d.t = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = wt.dim(0);
  require(wt.dim(1) == d.ci, "conv3d: channel mismatch, input " + shape_str(x.shape) +
                                 " vs weights " + shape_str(wt.shape));
  d.kt = wt.dim(2);
  d.kh = wt.dim(3);
  d.kw = wt.dim(4);
  require(d.t + 2 * padding >= d.kt && d.h + 2 * padding >= d.kh && d.w + 2 * padding >= d.kw,
          "conv3d: kernel " + shape_str(wt.shape) + " does not fit padded input " +
              shape_str(x.shape) + " at padding " + std::to_string(padding));
  d.to = (d.t + 2 * padding - d.kt) / stride + 1;
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

// Fills col[K2 x N2] (row-major) for time slice ts; rows are (ci,dh,dw),
// columns are output positions (ho,wo).
void fill_col2d(const real* x, const ConvDims& d, int stride, int padding, int ts, real* col) {
  const int n2 = d.ho * d.wo;
  const int64_t plane = int64_t(d.h) * d.w;
  const int64_t chan = int64_t(d.t) * plane;
  for (int ci = 0; ci < d.ci; ++ci) {
    const real* xc = x + ci * chan + int64_t(ts) * plane;
    for (int dh = 0; dh < d.kh; ++dh) {
      for (int dw = 0; dw < d.kw; ++dw) {
        real* row = col + (int64_t(ci) * d.kh * d.kw + dh * d.kw + dw) * n2;
        for (int ho = 0; ho < d.ho; ++ho) {
          int ih = ho * stride - padding + dh;
          real* dst = row + int64_t(ho) * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::memset(dst, 0, sizeof(real) * size_t(d.wo));
            continue;
          }
          const real* src = xc + int64_t(ih) * d.w;
          if (stride == 1) {
            int lo = std::max(0, padding - dw);
            int hi = std::min(d.wo - 1, d.w - 1 + padding - dw);
            if (lo > 0) std::memset(dst, 0, sizeof(real) * size_t(lo));
            if (hi >= lo) std::memcpy(dst + lo, src + lo - padding + dw, sizeof(real) * size_t(hi - lo + 1));
            if (hi + 1 < d.wo) std::memset(dst + hi + 1, 0, sizeof(real) * size_t(d.wo - hi - 1));
          } else {
            for (int wo = 0; wo < d.wo; ++wo) {
              int iw = wo * stride - padding + dw;
              dst[wo] = (iw < 0 || iw >= d.w) ? real(0) : src[iw];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of a col2d block back into the input gradient for slice ts.
void scatter_col2d(real* gx, const ConvDims& d, int stride, int padding, int ts, const real* col) {
  const int n2 = d.ho * d.wo;
  const int64_t plane = int64_t(d.h) * d.w;
  const int64_t chan = int64_t(d.t) * plane;
  for (int ci = 0; ci < d.ci; ++ci) {
    real* xc = gx + ci * chan + int64_t(ts) * plane;
    for (int dh = 0; dh < d.kh; ++dh) {
      for (int dw = 0; dw < d.kw; ++dw) {
        const real* row = col + (int64_t(ci) * d.kh * d.kw + dh * d.kw + dw) * n2;
        for (int ho = 0; ho < d.ho; ++ho) {
          int ih = ho * stride - padding + dh;
          if (ih < 0 || ih >= d.h) continue;
          const real* src = row + int64_t(ho) * d.wo;
          real* dst = xc + int64_t(ih) * d.w;
          for (int wo = 0; wo < d.wo; ++wo) {
            int iw = wo * stride - padding + dw;
            if (iw >= 0 && iw < d.w) dst[iw] += src[wo];
          }
        }
      }
    }
  }
}

// Weight slice for fixed kt offset as a [Co x K2] row-major matrix.
void pack_weights(const Tensor& wt, const ConvDims& d, int dt, real* wk) {
  const int k2 = d.ci * d.kh * d.kw;
  for (int co = 0; co < d.co; ++co) {
    for (int ci = 0; ci < d.ci; ++ci) {
      for (int dh = 0; dh < d.kh; ++dh) {
        const real* src = &wt.values[size_t(
            (((int64_t(co) * d.ci + ci) * d.kt + dt) * d.kh + dh) * d.kw)];
        real* dst = wk + int64_t(co) * k2 + (int64_t(ci) * d.kh + dh) * d.kw;
        std::memcpy(dst, src, sizeof(real) * size_t(d.kw));
      }
    }
  }
}

Tensor conv3d_forward(const Tensor& x, const Tensor& wt, int stride, int padding) {
  ConvDims d = conv_dims(x, wt, stride, padding);
  Tensor out({d.co, d.to, d.ho, d.wo});
  const int n2 = d.ho * d.wo;
  const int k2 = d.ci * d.kh * d.kw;

  if (d.kt == 1 && d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0) {
    // Pointwise conv is a plain matmul over all positions.
    const int64_t n = int64_t(d.t) * n2;
    CMapRM wm(wt.data(), d.co, d.ci);
    CMapRM xm(x.data(), d.ci, n);
    MapRM om(out.data(), d.co, n);
    om.noalias() = wm * xm;
    return out;
  }

  std::vector<real> col(size_t(k2) * n2);
  std::vector<real> wk(size_t(d.co) * k2 * d.kt);
  for (int dt = 0; dt < d.kt; ++dt) pack_weights(wt, d, dt, wk.data() + size_t(dt) * d.co * k2);

  const int64_t out_plane = int64_t(d.ho) * d.wo;
  const int64_t out_chan = int64_t(d.to) * out_plane;
  for (int ts = 0; ts < d.t; ++ts) {
    bool used = false;
    for (int dt = 0; dt < d.kt && !used; ++dt) {
      int num = ts + padding - dt;
      if (num >= 0 && num % stride == 0 && num / stride < d.to) used = true;
    }
    if (!used) continue;
    fill_col2d(x.data(), d, stride, padding, ts, col.data());
    CMapRM colm(col.data(), k2, n2);
    for (int dt = 0; dt < d.kt; ++dt) {
      int num = ts + padding - dt;
      if (num < 0 || num % stride != 0) continue;
      int to = num / stride;
      if (to >= d.to) continue;
      CMapRM wm(wk.data() + size_t(dt) * d.co * k2, d.co, k2);
      StridedMapRM om(out.data() + to * out_plane, d.co, n2, Eigen::OuterStride<>(out_chan));
      om.noalias() += wm * colm;
    }
  }
  return out;
}

void conv3d_backward(const Tensor& x, const Tensor& wt, int stride, int padding, const Tensor& gout,
                     Tensor* gx, Tensor* gw) {
  ConvDims d = conv_dims(x, wt, stride, padding);
  const int n2 = d.ho * d.wo;
  const int k2 = d.ci * d.kh * d.kw;
  const int64_t out_plane = int64_t(d.ho) * d.wo;
  const int64_t out_chan = int64_t(d.to) * out_plane;

  if (d.kt == 1 && d.kh == 1 && d.kw == 1 && stride == 1 && padding == 0) {
    const int64_t n = int64_t(d.t) * n2;
    CMapRM wm(wt.data(), d.co, d.ci);
    CMapRM xm(x.data(), d.ci, n);
    CMapRM gm(gout.data(), d.co, n);
    if (gx) {
      MapRM gxm(gx->data(), d.ci, n);
      gxm.noalias() += wm.transpose() * gm;
    }
    if (gw) {
      MapRM gwm(gw->data(), d.co, d.ci);
      gwm.noalias() += gm * xm.transpose();
    }
    return;
  }

  std::vector<real> col(size_t(k2) * n2);
  std::vector<real> gcol(size_t(k2) * n2);
  std::vector<real> wk(size_t(d.co) * k2 * d.kt);
  std::vector<real> gwk(size_t(d.co) * k2 * d.kt, real(0));
  for (int dt = 0; dt < d.kt; ++dt) pack_weights(wt, d, dt, wk.data() + size_t(dt) * d.co * k2);

  for (int ts = 0; ts < d.t; ++ts) {
    std::vector<std::pair<int, int>> uses;  // (to, dt)
    for (int dt = 0; dt < d.kt; ++dt) {
      int num = ts + padding - dt;
      if (num >= 0 && num % stride == 0 && num / stride < d.to) uses.emplace_back(num / stride, dt);
    }
    if (uses.empty()) continue;
    if (gw) fill_col2d(x.data(), d, stride, padding, ts, col.data());
    if (gx) std::memset(gcol.data(), 0, sizeof(real) * gcol.size());
    for (auto [to, dt] : uses) {
      CStridedMapRM gm(gout.data() + to * out_plane, d.co, n2, Eigen::OuterStride<>(out_chan));
      if (gx) {
        CMapRM wm(wk.data() + size_t(dt) * d.co * k2, d.co, k2);
        MapRM gcolm(gcol.data(), k2, n2);
        gcolm.noalias() += wm.transpose() * gm;
      }
      if (gw) {
        CMapRM colm(col.data(), k2, n2);
        MapRM gwm(gwk.data() + size_t(dt) * d.co * k2, d.co, k2);
        gwm.noalias() += gm * colm.transpose();
      }
    }
    if (gx) scatter_col2d(gx->data(), d, stride, padding, ts, gcol.data());
  }

  if (gw) {
    for (int dt = 0; dt < d.kt; ++dt) {
      const real* src = gwk.data() + size_t(dt) * d.co * k2;
      for (int co = 0; co < d.co; ++co) {
        for (int ci = 0; ci < d.ci; ++ci) {
          for (int dh = 0; dh < d.kh; ++dh) {
            real* dst = &gw->values[size_t((((int64_t(co) * d.ci + ci) * d.kt + dt) * d.kh + dh) * d.kw)];
            const real* s = src + int64_t(co) * k2 + (int64_t(ci) * d.kh + dh) * d.kw;
            for (int dw = 0; dw < d.kw; ++dw) dst[dw] += s[dw];
          }
        }
      }
    }
  }
}

// Per-axis sampling positions for resize3d; src = (dst+0.5)*in/out - 0.5.
struct AxisSample {
  std::vector<int> i0, i1;
  std::vector<real> f;  // fraction toward i1
};

AxisSample axis_samples(int in, int out, Resize mode) {
  AxisSample s;
  s.i0.resize(size_t(out));
  s.i1.resize(size_t(out));
  s.f.resize(size_t(out));
  for (int i = 0; i < out; ++i) {
    double src = (double(i) + 0.5) * double(in) / double(out) - 0.5;
    if (mode == Resize::Nearest) {
      int idx = std::clamp(int(std::floor(src + 0.5)), 0, in - 1);
      s.i0[size_t(i)] = s.i1[size_t(i)] = idx;
      s.f[size_t(i)] = 0;
    } else {
      src = std::clamp(src, 0.0, double(in - 1));
      int lo = int(std::floor(src));
      int hi = std::min(lo + 1, in - 1);
      s.i0[size_t(i)] = lo;
      s.i1[size_t(i)] = hi;
      s.f[size_t(i)] = real(src - lo);
    }
  }
  return s;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var conv3d(const Var& x, const Var& w, int stride, int padding) {
  Tensor out = conv3d_forward(x->value, w->value, stride, padding);
  return make_node(std::move(out), {x, w}, [x, w, stride, padding](Node& node) {
    Tensor* gx = nullptr;
    Tensor* gw = nullptr;
    if (x->requires_grad) {
      x->ensure_grad();
      gx = &x->grad;
    }
    if (w->requires_grad) {
      w->ensure_grad();
      gw = &w->grad;
    }
    conv3d_backward(x->value, w->value, stride, padding, node.grad, gx, gw);
  });
}

Var leaky_relu(const Var& x, real slope) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = xv[i] > 0 ? xv[i] : slope * xv[i];
  return make_node(std::move(out), {x}, [x, slope](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i)
      x->grad[i] += x->value[i] > 0 ? node.grad[i] : slope * node.grad[i];
  });
}

Var log_softmax_classes(const Var& logits) {
  const Tensor& xv = logits->value;
  require(xv.rank() >= 1 && xv.dim(0) >= 2, "softmax: leading class dim must be >= 2");
  require(xv.all_finite(), "softmax: non-finite logits");
  const int k = xv.dim(0);
  const int64_t n = xv.numel() / k;
  Tensor out(xv.shape);
  for (int64_t i = 0; i < n; ++i) {
    real m = xv[i];
    for (int c = 1; c < k; ++c) m = std::max(m, xv[c * n + i]);
    real sum = 0;
    for (int c = 0; c < k; ++c) sum += std::exp(xv[c * n + i] - m);
    real lse = m + std::log(sum);
    for (int c = 0; c < k; ++c) out[c * n + i] = xv[c * n + i] - lse;
  }
  return make_node(std::move(out), {logits}, [logits, k, n](Node& node) {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      real gsum = 0;
      for (int c = 0; c < k; ++c) gsum += node.grad[c * n + i];
      for (int c = 0; c < k; ++c) {
        real p = std::exp(node.value[c * n + i]);
        logits->grad[c * n + i] += node.grad[c * n + i] - p * gsum;
      }
    }
  });
}

Var softmax_classes(const Var& logits) {
  Var ls = log_softmax_classes(logits);
  const Tensor& lv = ls->value;
  Tensor out(lv.shape);
  const int64_t total = lv.numel();
  for (int64_t i = 0; i < total; ++i) out[i] = std::exp(lv[i]);
  const int k = lv.dim(0);
  const int64_t n = total / k;
  return make_node(std::move(out), {ls}, [ls, k, n](Node& node) {
    if (!ls->requires_grad) return;
    ls->ensure_grad();
    // d(logsoftmax) = dy * softmax; softmax == node.value
    const int64_t total = node.value.numel();
    (void)k;
    (void)n;
    for (int64_t i = 0; i < total; ++i) ls->grad[i] += node.grad[i] * node.value[i];
  });
}

Var sigmoid(const Var& x) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) {
    real v = xv[i];
    out[i] = v >= 0 ? real(1) / (real(1) + std::exp(-v))
                    : std::exp(v) / (real(1) + std::exp(v));
  }
  return make_node(std::move(out), {x}, [x](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) {
      real y = node.value[i];
      x->grad[i] += node.grad[i] * y * (real(1) - y);
    }
  });
}

Var add(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Add); }
Var sub(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Sub); }
Var mul(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Mul); }

Var minimum(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "minimum: shape mismatch " + shape_str(a->value.shape) +
                                             " vs " + shape_str(b->value.shape));
  const int64_t n = a->value.numel();
  Tensor out(a->value.shape);
  for (int64_t i = 0; i < n; ++i) out[i] = std::min(a->value[i], b->value[i]);
  return make_node(std::move(out), {a, b}, [a, b](Node& node) {
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) {
      real av = a->value[i], bv = b->value[i], g = node.grad[i];
      real ga = av < bv ? g : (av == bv ? g * real(0.5) : real(0));
      if (a->requires_grad && ga != 0) {
        a->ensure_grad();
        a->grad[i] += ga;
      }
      if (b->requires_grad) {
        real gb = g - ga;
        if (av < bv) gb = 0;
        if (gb != 0) {
          b->ensure_grad();
          b->grad[i] += gb;
        }
      }
    }
  });
}

Var clip(const Var& x, real lo, real hi) {
  require(lo <= hi, "clip: lo must be <= hi");
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::clamp(xv[i], lo, hi);
  return make_node(std::move(out), {x}, [x, lo, hi](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) {
      real v = x->value[i];
      if (v >= lo && v <= hi) x->grad[i] += node.grad[i];
    }
  });
}

Var vlog(const Var& x) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::log(xv[i]);
  return make_node(std::move(out), {x}, [x](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += node.grad[i] / x->value[i];
  });
}

Var vexp(const Var& x) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(xv[i]);
  return make_node(std::move(out), {x}, [x](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += node.grad[i] * node.value[i];
  });
}

Var scale(const Var& x, real factor) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = xv[i] * factor;
  return make_node(std::move(out), {x}, [x, factor](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += node.grad[i] * factor;
  });
}

Var add_scalar(const Var& x, real c) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape);
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = xv[i] + c;
  return make_node(std::move(out), {x}, [x](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const int64_t n = node.grad.numel();
    for (int64_t i = 0; i < n; ++i) x->grad[i] += node.grad[i];
  });
}

Var mean_all(const Var& x) {
  const int64_t n = x->value.numel();
  require(n > 0, "mean: empty tensor");
  real sum = 0;
  for (int64_t i = 0; i < n; ++i) sum += x->value[i];
  Tensor out({1});
  out[0] = sum / real(n);
  return make_node(std::move(out), {x}, [x, n](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    real g = node.grad[0] / real(n);
    for (int64_t i = 0; i < n; ++i) x->grad[i] += g;
  });
}

Var sum_classes(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() >= 2, "sum_classes: need a leading class dim");
  const int k = xv.dim(0);
  const int64_t n = xv.numel() / k;
  Tensor out(std::vector<int>(xv.shape.begin() + 1, xv.shape.end()));
  for (int64_t i = 0; i < n; ++i) {
    real s = 0;
    for (int c = 0; c < k; ++c) s += xv[c * n + i];
    out[i] = s;
  }
  return make_node(std::move(out), {x}, [x, k, n](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int c = 0; c < k; ++c) x->grad[c * n + i] += node.grad[i];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require(av.rank() == bv.rank() && av.rank() >= 2, "concat: rank mismatch");
  for (int i = 1; i < av.rank(); ++i)
    require(av.dim(i) == bv.dim(i), "concat: trailing shape mismatch " + shape_str(av.shape) +
                                        " vs " + shape_str(bv.shape));
  std::vector<int> os = av.shape;
  os[0] += bv.dim(0);
  Tensor out(os);
  std::memcpy(out.data(), av.data(), sizeof(real) * size_t(av.numel()));
  std::memcpy(out.data() + av.numel(), bv.data(), sizeof(real) * size_t(bv.numel()));
  const int64_t na = av.numel();
  const int64_t nb = bv.numel();
  return make_node(std::move(out), {a, b}, [a, b, na, nb](Node& node) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < na; ++i) a->grad[i] += node.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < nb; ++i) b->grad[i] += node.grad[na + i];
    }
  });
}

Tensor resize3d_values(const Tensor& x, int t_out, int h_out, int w_out, Resize mode) {
  require(x.rank() == 4, "resize3d: input must be [C,T,H,W]");
  require(t_out >= 1 && h_out >= 1 && w_out >= 1, "resize3d: output dims must be >= 1");
  const int c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  AxisSample st = axis_samples(t, t_out, mode);
  AxisSample sh = axis_samples(h, h_out, mode);
  AxisSample sw = axis_samples(w, w_out, mode);
  Tensor out({c, t_out, h_out, w_out});
  for (int ci = 0; ci < c; ++ci) {
    const real* xc = x.data() + int64_t(ci) * t * h * w;
    real* oc = out.data() + int64_t(ci) * t_out * h_out * w_out;
    for (int to = 0; to < t_out; ++to) {
      for (int ho = 0; ho < h_out; ++ho) {
        real* orow = oc + (int64_t(to) * h_out + ho) * w_out;
        for (int wo = 0; wo < w_out; ++wo) {
          real acc = 0;
          for (int bt = 0; bt < 2; ++bt) {
            real wt_ = bt ? st.f[size_t(to)] : real(1) - st.f[size_t(to)];
            if (wt_ == 0) continue;
            int ti = bt ? st.i1[size_t(to)] : st.i0[size_t(to)];
            for (int bh = 0; bh < 2; ++bh) {
              real wh = bh ? sh.f[size_t(ho)] : real(1) - sh.f[size_t(ho)];
              if (wh == 0) continue;
              int hi = bh ? sh.i1[size_t(ho)] : sh.i0[size_t(ho)];
              const real* row = xc + (int64_t(ti) * h + hi) * w;
              for (int bw = 0; bw < 2; ++bw) {
                real ww = bw ? sw.f[size_t(wo)] : real(1) - sw.f[size_t(wo)];
                if (ww == 0) continue;
                int wi = bw ? sw.i1[size_t(wo)] : sw.i0[size_t(wo)];
                acc += wt_ * wh * ww * row[wi];
              }
            }
          }
          orow[wo] = acc;
        }
      }
    }
  }
  return out;
}

Var resize3d(const Var& x, int t_out, int h_out, int w_out, Resize mode) {
  Tensor out = resize3d_values(x->value, t_out, h_out, w_out, mode);
  return make_node(std::move(out), {x}, [x, t_out, h_out, w_out, mode](Node& node) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const Tensor& xv = x->value;
    const int c = xv.dim(0), t = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    AxisSample st = axis_samples(t, t_out, mode);
    AxisSample sh = axis_samples(h, h_out, mode);
    AxisSample sw = axis_samples(w, w_out, mode);
    for (int ci = 0; ci < c; ++ci) {
      real* gc = x->grad.data() + int64_t(ci) * t * h * w;
      const real* oc = node.grad.data() + int64_t(ci) * t_out * h_out * w_out;
      for (int to = 0; to < t_out; ++to) {
        for (int ho = 0; ho < h_out; ++ho) {
          const real* orow = oc + (int64_t(to) * h_out + ho) * w_out;
          for (int wo = 0; wo < w_out; ++wo) {
            real g = orow[wo];
            if (g == 0) continue;
            for (int bt = 0; bt < 2; ++bt) {
              real wt_ = bt ? st.f[size_t(to)] : real(1) - st.f[size_t(to)];
              if (wt_ == 0) continue;
              int ti = bt ? st.i1[size_t(to)] : st.i0[size_t(to)];
              for (int bh = 0; bh < 2; ++bh) {
                real wh = bh ? sh.f[size_t(ho)] : real(1) - sh.f[size_t(ho)];
                if (wh == 0) continue;
                int hi = bh ? sh.i1[size_t(ho)] : sh.i0[size_t(ho)];
                real* row = gc + (int64_t(ti) * h + hi) * w;
                for (int bw = 0; bw < 2; ++bw) {
                  real ww = bw ? sw.f[size_t(wo)] : real(1) - sw.f[size_t(wo)];
                  if (ww == 0) continue;
                  int wi = bw ? sw.i1[size_t(wo)] : sw.i0[size_t(wo)];
                  row[wi] += g * wt_ * wh * ww;
                }
              }
            }
          }
        }
      }
    }
  });
}

Var bce_loss(const Var& pred, const Var& target) {
  const Tensor& pv = pred->value;
  const Tensor& tv = target->value;
  require(pv.same_shape(tv), "bce: shape mismatch " + shape_str(pv.shape) + " vs " + shape_str(tv.shape));
  const int64_t n = pv.numel();
  require(n > 0, "bce: empty input");
  constexpr real kEps = real(1e-7);
  real sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    real t = tv[i];
    require(t >= 0 && t <= 1, "bce: target outside [0,1]");
    real p = std::clamp(pv[i], kEps, real(1) - kEps);
    sum += -(t * std::log(p) + (real(1) - t) * std::log(real(1) - p));
  }
  Tensor out({1});
  out[0] = sum / real(n);
  return make_node(std::move(out), {pred, target}, [pred, target, n](Node& node) {
    if (!pred->requires_grad) return;
    pred->ensure_grad();
    constexpr real kEps = real(1e-7);
    real g = node.grad[0] / real(n);
    for (int64_t i = 0; i < n; ++i) {
      real raw = pred->value[i];
      if (raw < kEps || raw > real(1) - kEps) continue;  // clamp blocks gradient
      real t = target->value[i];
      pred->grad[i] += g * (-t / raw + (real(1) - t) / (real(1) - raw));
    }
  });
}

Var mse_loss(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require(av.same_shape(bv), "mse: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  const int64_t n = av.numel();
  require(n > 0, "mse: empty input");
  real sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    real d = av[i] - bv[i];
    sum += d * d;
  }
  Tensor out({1});
  out[0] = sum / real(n);
  return make_node(std::move(out), {a, b}, [a, b, n](Node& node) {
    real g = node.grad[0] * real(2) / real(n);
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n; ++i) a->grad[i] += g * (a->value[i] - b->value[i]);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) b->grad[i] -= g * (a->value[i] - b->value[i]);
    }
  });
}

void backward(const Var& root) {
  require(root != nullptr, "backward: null root");
  require(root->value.numel() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; order is a function of graph structure only.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent && parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.values.empty()) node->backward_fn(*node);
  }
}

}  // namespace rl4seg::ad
