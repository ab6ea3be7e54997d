#include "bitfold/ops.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace bitfold {
namespace {

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

void require_suffix(const Var& a, const Var& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape()))
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_string(a.shape()) + " with " +
                                       shape_string(b.shape()));
}

// Sums a gradient of shape `full` down to the trailing block of size `inner`.
Tensor reduce_to_suffix(const Tensor& g, const Shape& tail) {
  Tensor out(tail);
  const std::size_t inner = out.size();
  const std::size_t outer = g.size() / inner;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[i] += g[o * inner + i];
  return out;
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const int xid = x.id();
  Graph& g = x.graph();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {x}, [xid, yid, df](Graph& gr, const Tensor& go) {
    const Tensor& xv2 = gr.value(xid);
    const Tensor& yv2 = gr.value(yid);
    Tensor gx(xv2.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = go[i] * df(xv2[i], yv2[i]);
    gr.accumulate(xid, gx);
  });
}

std::vector<int> strides_of(const Shape& s) {
  std::vector<int> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Tensor permute_tensor(const Tensor& x, const std::vector<int>& axes) {
  const Shape& in = x.shape();
  const int r = x.rank();
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  Tensor out(out_shape);
  const auto in_st = strides_of(in);
  std::vector<int> st(r);
  for (int i = 0; i < r; ++i) st[i] = in_st[axes[i]];
  std::vector<int> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t n = 0; n < out.size(); ++n) {
    out[n] = x[src];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      src += st[d];
      if (idx[d] < out_shape[d]) break;
      src -= static_cast<std::size_t>(st[d]) * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

int norm_axis(int axis, int rank) { return axis < 0 ? axis + rank : axis; }

} // namespace

// ------------------------------------------------------------ elementwise

Var add(Var a, Var b) {
  require_suffix(a, b, "add");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % inner];
  const int aid = a.id(), bid = b.id();
  const Shape bshape = bv.shape();
  return a.graph().record(std::move(y), {a, b}, [aid, bid, bshape](Graph& g, const Tensor& go) {
    g.accumulate(aid, go);
    if (g.requires_grad(bid)) g.accumulate(bid, reduce_to_suffix(go, bshape));
  });
}

Var sub(Var a, Var b) {
  require_suffix(a, b, "sub");
  Tensor y = a.value();
  const Tensor& bv = b.value();
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i % inner];
  const int aid = a.id(), bid = b.id();
  const Shape bshape = bv.shape();
  return a.graph().record(std::move(y), {a, b}, [aid, bid, bshape](Graph& g, const Tensor& go) {
    g.accumulate(aid, go);
    if (g.requires_grad(bid)) {
      Tensor gb = reduce_to_suffix(go, bshape);
      for (double& v : gb.values()) v = -v;
      g.accumulate(bid, gb);
    }
  });
}

Var mul(Var a, Var b) {
  require_suffix(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i % inner];
  const int aid = a.id(), bid = b.id();
  return a.graph().record(std::move(y), {a, b}, [aid, bid](Graph& g, const Tensor& go) {
    const Tensor& av2 = g.value(aid);
    const Tensor& bv2 = g.value(bid);
    const std::size_t inner2 = bv2.size();
    if (g.requires_grad(aid)) {
      Tensor ga(av2.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] * bv2[i % inner2];
      g.accumulate(aid, ga);
    }
    if (g.requires_grad(bid)) {
      Tensor gb(bv2.shape());
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % inner2] += go[i] * av2[i];
      g.accumulate(bid, gb);
    }
  });
}

Var div(Var a, Var b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "div: " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] / bv[i];
  const int aid = a.id(), bid = b.id();
  return a.graph().record(std::move(y), {a, b}, [aid, bid](Graph& g, const Tensor& go) {
    const Tensor& av2 = g.value(aid);
    const Tensor& bv2 = g.value(bid);
    if (g.requires_grad(aid)) {
      Tensor ga(av2.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] / bv2[i];
      g.accumulate(aid, ga);
    }
    if (g.requires_grad(bid)) {
      Tensor gb(bv2.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -go[i] * av2[i] / (bv2[i] * bv2[i]);
      g.accumulate(bid, gb);
    }
  });
}

Var scale(Var x, double c) {
  return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sqrt(Var x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var clamp_min(Var x, double lo) {
  return unary(x, [lo](double v) { return std::max(v, lo); }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var reciprocal(Var x) {
  return unary(x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var silu(Var x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

// ------------------------------------------------------------- reductions

Var sum_all(Var x) {
  double s = 0;
  for (double v : x.value().values()) s += v;
  const int xid = x.id();
  return x.graph().record(Tensor::scalar(s), {x}, [xid](Graph& g, const Tensor& go) {
    Tensor gx(g.value(xid).shape(), go[0]);
    g.accumulate(xid, gx);
  });
}

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum_all(x), 1.0 / n);
}

Var sum_last(Var x) {
  const Tensor& xv = x.value();
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor y(out_shape);
  const int c = xv.cols();
  for (int r = 0; r < xv.rows(); ++r) {
    double s = 0;
    for (int k = 0; k < c; ++k) s += xv[static_cast<std::size_t>(r) * c + k];
    y[r] = s;
  }
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid](Graph& g, const Tensor& go) {
    const Tensor& xv2 = g.value(xid);
    Tensor gx(xv2.shape());
    const int c2 = xv2.cols();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = go[i / c2];
    g.accumulate(xid, gx);
  });
}

Var mean_last(Var x) { return scale(sum_last(x), 1.0 / x.value().cols()); }

// ------------------------------------------------------------------ linear

Var matmul(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0))
    fail(ErrorCode::ShapeMismatch, "matmul: " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()));
  Shape out_shape = xv.shape();
  out_shape.back() = wv.dim(1);
  Tensor y(out_shape);
  y.matrix().noalias() = xv.matrix() * wv.matrix();
  const int xid = x.id(), wid = w.id();
  return x.graph().record(std::move(y), {x, w}, [xid, wid](Graph& g, const Tensor& go) {
    const Tensor& xv2 = g.value(xid);
    const Tensor& wv2 = g.value(wid);
    auto gom = go.matrix();
    if (g.requires_grad(xid)) {
      Tensor gx(xv2.shape());
      gx.matrix().noalias() = gom * wv2.matrix().transpose();
      g.accumulate(xid, gx);
    }
    if (g.requires_grad(wid)) {
      Tensor gw(wv2.shape());
      gw.matrix().noalias() = xv2.matrix().transpose() * gom;
      g.accumulate(wid, gw);
    }
  });
}

Var bmm(Var a, Var b, bool ta, bool tb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    fail(ErrorCode::ShapeMismatch, "bmm: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  const int batch = av.dim(0);
  const int m = ta ? av.dim(2) : av.dim(1);
  const int k = ta ? av.dim(1) : av.dim(2);
  const int kb = tb ? bv.dim(2) : bv.dim(1);
  const int n = tb ? bv.dim(1) : bv.dim(2);
  if (k != kb)
    fail(ErrorCode::ShapeMismatch, "bmm inner: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  using Map = Eigen::Map<const RowMatrix<double>>;
  using MutMap = Eigen::Map<RowMatrix<double>>;
  Tensor y(Shape{batch, m, n});
  const int ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
  for (int i = 0; i < batch; ++i) {
    Map am(av.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
    Map bm(bv.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
    MutMap ym(y.data() + static_cast<std::size_t>(i) * m * n, m, n);
    if (!ta && !tb) ym.noalias() = am * bm;
    else if (ta && !tb) ym.noalias() = am.transpose() * bm;
    else if (!ta && tb) ym.noalias() = am * bm.transpose();
    else ym.noalias() = am.transpose() * bm.transpose();
  }
  const int aid = a.id(), bid = b.id();
  return a.graph().record(std::move(y), {a, b}, [aid, bid, ta, tb, m, n](Graph& g, const Tensor& go) {
    const Tensor& av2 = g.value(aid);
    const Tensor& bv2 = g.value(bid);
    const int batch2 = av2.dim(0);
    const int ar2 = av2.dim(1), ac2 = av2.dim(2), br2 = bv2.dim(1), bc2 = bv2.dim(2);
    const bool need_a = g.requires_grad(aid), need_b = g.requires_grad(bid);
    Tensor ga(need_a ? av2.shape() : Shape{0});
    Tensor gb(need_b ? bv2.shape() : Shape{0});
    for (int i = 0; i < batch2; ++i) {
      Map am(av2.data() + static_cast<std::size_t>(i) * ar2 * ac2, ar2, ac2);
      Map bm(bv2.data() + static_cast<std::size_t>(i) * br2 * bc2, br2, bc2);
      Map gm(go.data() + static_cast<std::size_t>(i) * m * n, m, n);
      // Y = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
      if (need_a) {
        MutMap gam(ga.data() + static_cast<std::size_t>(i) * ar2 * ac2, ar2, ac2);
        if (!ta && !tb) gam.noalias() = gm * bm.transpose();
        else if (!ta && tb) gam.noalias() = gm * bm;
        else if (ta && !tb) gam.noalias() = bm * gm.transpose();
        else gam.noalias() = bm.transpose() * gm.transpose();
      }
      if (need_b) {
        MutMap gbm(gb.data() + static_cast<std::size_t>(i) * br2 * bc2, br2, bc2);
        if (!ta && !tb) gbm.noalias() = am.transpose() * gm;
        else if (ta && !tb) gbm.noalias() = am * gm;
        else if (!ta && tb) gbm.noalias() = gm.transpose() * am;
        else gbm.noalias() = gm.transpose() * am.transpose();
      }
    }
    if (need_a) g.accumulate(aid, ga);
    if (need_b) g.accumulate(bid, gb);
  });
}

// ------------------------------------------------------------------ layout

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid](Graph& g, const Tensor& go) {
    g.accumulate(xid, go.reshaped(g.value(xid).shape()));
  });
}

Var permute(Var x, const std::vector<int>& axes) {
  if (static_cast<int>(axes.size()) != x.rank())
    fail(ErrorCode::ShapeMismatch, "permute rank " + std::to_string(axes.size()) + " on " +
                                       shape_string(x.shape()));
  std::vector<int> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int>(i);
  Tensor y = permute_tensor(x.value(), axes);
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid, inverse](Graph& g, const Tensor& go) {
    g.accumulate(xid, permute_tensor(go, inverse));
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat of nothing");
  const int r = parts[0].rank();
  axis = norm_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  std::vector<int> widths;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != r)
      fail(ErrorCode::ShapeMismatch, "concat rank mismatch " + shape_string(s));
    for (int d = 0; d < r; ++d)
      if (d != axis && s[d] != parts[0].shape()[d])
        fail(ErrorCode::ShapeMismatch, "concat " + shape_string(s) + " vs " + shape_string(parts[0].shape()));
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
  Tensor y(out_shape);
  const std::size_t row = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::size_t offset = 0;
  std::vector<int> ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t block = static_cast<std::size_t>(widths[p]) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * block, block, y.data() + o * row + offset);
    offset += block;
    ids.push_back(parts[p].id());
  }
  return parts[0].graph().record(std::move(y), parts, [ids, widths, outer, inner, row](Graph& g, const Tensor& go) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t block = static_cast<std::size_t>(widths[p]) * inner;
      if (g.requires_grad(ids[p])) {
        Tensor gp(g.value(ids[p]).shape());
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(go.data() + o * row + off, block, gp.data() + o * block);
        g.accumulate(ids[p], gp);
      }
      off += block;
    }
  });
}

Var slice(Var x, int axis, int start, int length) {
  const Tensor& xv = x.value();
  const int r = xv.rank();
  axis = norm_axis(axis, r);
  if (start < 0 || length < 0 || start + length > xv.dim(axis))
    fail(ErrorCode::ShapeMismatch, "slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                                       ") of axis " + std::to_string(axis) + " in " + shape_string(xv.shape()));
  Shape out_shape = xv.shape();
  out_shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
  const std::size_t in_row = static_cast<std::size_t>(xv.dim(axis)) * inner;
  const std::size_t block = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  Tensor y(out_shape);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * in_row + off, block, y.data() + o * block);
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid, outer, in_row, block, off](Graph& g, const Tensor& go) {
    Tensor gx(g.value(xid).shape());
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(go.data() + o * block, block, gx.data() + o * in_row + off);
    g.accumulate(xid, gx);
  });
}

// --------------------------------------------------------- normalisation

Var softmax_last(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int c = xv.cols();
  for (int r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data() + static_cast<std::size_t>(r) * c;
    double* out = y.data() + static_cast<std::size_t>(r) * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0;
    for (int k = 0; k < c; ++k) s += (out[k] = std::exp(in[k] - mx));
    for (int k = 0; k < c; ++k) out[k] /= s;
  }
  Graph& g = x.graph();
  const int xid = x.id();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {x}, [xid, yid](Graph& gr, const Tensor& go) {
    const Tensor& yv = gr.value(yid);
    Tensor gx(yv.shape());
    const int c2 = yv.cols();
    for (int r = 0; r < yv.rows(); ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * c2;
      double dot = 0;
      for (int k = 0; k < c2; ++k) dot += go[base + k] * yv[base + k];
      for (int k = 0; k < c2; ++k) gx[base + k] = yv[base + k] * (go[base + k] - dot);
    }
    gr.accumulate(xid, gx);
  });
}

Var log_softmax_last(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int c = xv.cols();
  for (int r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data() + static_cast<std::size_t>(r) * c;
    double* out = y.data() + static_cast<std::size_t>(r) * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0;
    for (int k = 0; k < c; ++k) s += std::exp(in[k] - mx);
    const double lse = mx + std::log(s);
    for (int k = 0; k < c; ++k) out[k] = in[k] - lse;
  }
  Graph& g = x.graph();
  const int xid = x.id();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {x}, [xid, yid](Graph& gr, const Tensor& go) {
    const Tensor& yv = gr.value(yid);
    Tensor gx(yv.shape());
    const int c2 = yv.cols();
    for (int r = 0; r < yv.rows(); ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * c2;
      double s = 0;
      for (int k = 0; k < c2; ++k) s += go[base + k];
      for (int k = 0; k < c2; ++k) gx[base + k] = go[base + k] - std::exp(yv[base + k]) * s;
    }
    gr.accumulate(xid, gx);
  });
}

Var layernorm_last(Var x, double eps) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int c = xv.cols();
  const int rows = xv.rows();
  std::vector<double> inv_std(rows);
  for (int r = 0; r < rows; ++r) {
    const double* in = xv.data() + static_cast<std::size_t>(r) * c;
    double* out = y.data() + static_cast<std::size_t>(r) * c;
    double mu = 0;
    for (int k = 0; k < c; ++k) mu += in[k];
    mu /= c;
    double var = 0;
    for (int k = 0; k < c; ++k) var += (in[k] - mu) * (in[k] - mu);
    var /= c;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int k = 0; k < c; ++k) out[k] = (in[k] - mu) * inv_std[r];
  }
  Graph& g = x.graph();
  const int xid = x.id();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {x}, [xid, yid, inv_std](Graph& gr, const Tensor& go) {
    const Tensor& yv = gr.value(yid);
    Tensor gx(yv.shape());
    const int c2 = yv.cols();
    for (int r = 0; r < yv.rows(); ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * c2;
      double mg = 0, mgy = 0;
      for (int k = 0; k < c2; ++k) {
        mg += go[base + k];
        mgy += go[base + k] * yv[base + k];
      }
      mg /= c2;
      mgy /= c2;
      for (int k = 0; k < c2; ++k) gx[base + k] = inv_std[r] * (go[base + k] - mg - yv[base + k] * mgy);
    }
    gr.accumulate(xid, gx);
  });
}

// ------------------------------------------------------------ indexing

Var gather_rows(Var table, const std::vector<int>& indices, Shape prefix) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2 || shape_size(prefix) != indices.size())
    fail(ErrorCode::ShapeMismatch, "gather_rows from " + shape_string(tv.shape()) + " into " +
                                       shape_string(prefix));
  const int d = tv.dim(1);
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor y(out_shape);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const int row = indices[n];
    if (row < 0 || row >= tv.dim(0))
      fail(ErrorCode::IndexOutOfRange, "row " + std::to_string(row) + " of " + std::to_string(tv.dim(0)));
    std::copy_n(tv.data() + static_cast<std::size_t>(row) * d, d, y.data() + n * d);
  }
  const int tid = table.id();
  return table.graph().record(std::move(y), {table}, [tid, indices, d](Graph& g, const Tensor& go) {
    Tensor gt(g.value(tid).shape());
    for (std::size_t n = 0; n < indices.size(); ++n)
      for (int k = 0; k < d; ++k) gt[static_cast<std::size_t>(indices[n]) * d + k] += go[n * d + k];
    g.accumulate(tid, gt);
  });
}

Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<double>& weights) {
  const Tensor& lv = logits.value();
  const int c = lv.cols();
  const int n = lv.rows();
  if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
    fail(ErrorCode::ShapeMismatch, "cross_entropy targets/weights vs " + shape_string(lv.shape()));
  std::vector<double> probs(lv.size());
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    const double* in = lv.data() + static_cast<std::size_t>(r) * c;
    double* p = probs.data() + static_cast<std::size_t>(r) * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0;
    for (int k = 0; k < c; ++k) s += (p[k] = std::exp(in[k] - mx));
    for (int k = 0; k < c; ++k) p[k] /= s;
    if (weights[r] != 0.0) {
      if (targets[r] < 0 || targets[r] >= c)
        fail(ErrorCode::IndexOutOfRange, "target " + std::to_string(targets[r]) + " of " + std::to_string(c));
      loss += weights[r] * -(in[targets[r]] - mx - std::log(s));
    }
  }
  const int lid = logits.id();
  return logits.graph().record(Tensor::scalar(loss), {logits},
                               [lid, probs = std::move(probs), targets, weights, c](Graph& g, const Tensor& go) {
                                 Tensor gl(g.value(lid).shape());
                                 for (std::size_t r = 0; r < targets.size(); ++r) {
                                   if (weights[r] == 0.0) continue;
                                   const double w = weights[r] * go[0];
                                   for (int k = 0; k < c; ++k) gl[r * c + k] = w * probs[r * c + k];
                                   gl[r * c + targets[r]] -= w;
                                 }
                                 g.accumulate(lid, gl);
                               });
}

// -------------------------------------------------------------- geometry

Var cross_concat(Var h) {
  const Tensor& hv = h.value();
  if (hv.rank() != 2) fail(ErrorCode::ShapeMismatch, "cross_concat of " + shape_string(hv.shape()));
  const int l = hv.dim(0), d = hv.dim(1);
  Tensor y(Shape{l, l, 2 * d});
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      double* out = y.data() + (static_cast<std::size_t>(i) * l + j) * 2 * d;
      std::copy_n(hv.data() + static_cast<std::size_t>(i) * d, d, out);
      std::copy_n(hv.data() + static_cast<std::size_t>(j) * d, d, out + d);
    }
  const int hid = h.id();
  return h.graph().record(std::move(y), {h}, [hid, l, d](Graph& g, const Tensor& go) {
    Tensor gh(Shape{l, d});
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j) {
        const double* gin = go.data() + (static_cast<std::size_t>(i) * l + j) * 2 * d;
        for (int k = 0; k < d; ++k) {
          gh[static_cast<std::size_t>(i) * d + k] += gin[k];
          gh[static_cast<std::size_t>(j) * d + k] += gin[d + k];
        }
      }
    g.accumulate(hid, gh);
  });
}

Var outer_add(Var a, Var b) {
  if (a.rank() != 2 || a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "outer_add: " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  const int l = a.dim(0), d = a.dim(1);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(Shape{l, l, d});
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      for (int k = 0; k < d; ++k)
        y[(static_cast<std::size_t>(i) * l + j) * d + k] = av[static_cast<std::size_t>(i) * d + k] +
                                                           bv[static_cast<std::size_t>(j) * d + k];
  const int aid = a.id(), bid = b.id();
  return a.graph().record(std::move(y), {a, b}, [aid, bid, l, d](Graph& g, const Tensor& go) {
    Tensor ga(Shape{l, d}), gb(Shape{l, d});
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j)
        for (int k = 0; k < d; ++k) {
          const double v = go[(static_cast<std::size_t>(i) * l + j) * d + k];
          ga[static_cast<std::size_t>(i) * d + k] += v;
          gb[static_cast<std::size_t>(j) * d + k] += v;
        }
    g.accumulate(aid, ga);
    g.accumulate(bid, gb);
  });
}

Var expand_last(Var x, int n) {
  Shape shape = x.shape();
  shape.push_back(n);
  Tensor y(shape);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) std::fill_n(y.data() + i * n, n, xv[i]);
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid, n](Graph& g, const Tensor& go) {
    Tensor gx(g.value(xid).shape());
    for (std::size_t i = 0; i < gx.size(); ++i)
      for (int k = 0; k < n; ++k) gx[i] += go[i * n + k];
    g.accumulate(xid, gx);
  });
}

Var compose_frames(Var rotations, Var steps) {
  using M3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  using V3 = Eigen::Vector3d;
  const Tensor& rv = rotations.value();
  const Tensor& dv = steps.value();
  if (rv.rank() != 3 || rv.dim(1) != 3 || rv.dim(2) != 3 || dv.rank() != 2 || dv.dim(1) != 3 ||
      dv.dim(0) != rv.dim(0))
    fail(ErrorCode::ShapeMismatch, "compose_frames: " + shape_string(rv.shape()) + " with " + shape_string(dv.shape()));
  const int l = rv.dim(0);
  auto rot = [](const Tensor& t, int i) { return Eigen::Map<const M3>(t.data() + 9 * i); };
  auto vec = [](const Tensor& t, int i) { return Eigen::Map<const V3>(t.data() + 3 * i); };
  Tensor y(Shape{l, 12});
  M3 gprev = M3::Identity();
  V3 p = V3::Zero();
  for (int i = 0; i < l; ++i) {
    p += gprev * vec(dv, i);
    const M3 gi = gprev * rot(rv, i);
    Eigen::Map<V3>(y.data() + 12 * i) = p;
    Eigen::Map<M3>(y.data() + 12 * i + 3) = gi;
    gprev = gi;
  }
  Graph& g = rotations.graph();
  const int rid = rotations.id(), did = steps.id();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {rotations, steps}, [rid, did, yid, l, rot, vec](Graph& gr, const Tensor& go) {
    const Tensor& rv2 = gr.value(rid);
    const Tensor& dv2 = gr.value(did);
    const Tensor& yv = gr.value(yid);
    auto frame = [&](int i) -> M3 { return i < 0 ? M3::Identity() : M3(Eigen::Map<const M3>(yv.data() + 12 * i + 3)); };
    Tensor gr_rot(rv2.shape()), gr_step(dv2.shape());
    V3 psum = V3::Zero();     // adjoint of p_i accumulated over later positions
    M3 gnext = M3::Zero();    // adjoint of G_i flowing back from step i + 1
    for (int i = l - 1; i >= 0; --i) {
      psum += Eigen::Map<const V3>(go.data() + 12 * i);
      const M3 gbar = Eigen::Map<const M3>(go.data() + 12 * i + 3) + gnext;
      const M3 gprev = frame(i - 1);
      Eigen::Map<M3>(gr_rot.data() + 9 * i) = gprev.transpose() * gbar;
      Eigen::Map<V3>(gr_step.data() + 3 * i) = gprev.transpose() * psum;
      gnext = gbar * rot(rv2, i).transpose() + psum * vec(dv2, i).transpose();
    }
    gr.accumulate(rid, gr_rot);
    gr.accumulate(did, gr_step);
  });
}

Var cross_last(Var a, Var b) {
  if (a.shape() != b.shape() || a.shape().back() != 3)
    fail(ErrorCode::ShapeMismatch, "cross_last: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  auto cross = [](const Tensor& u, const Tensor& v) {
    Tensor w(u.shape());
    for (std::size_t r = 0; r < u.size(); r += 3) {
      w[r] = u[r + 1] * v[r + 2] - u[r + 2] * v[r + 1];
      w[r + 1] = u[r + 2] * v[r] - u[r] * v[r + 2];
      w[r + 2] = u[r] * v[r + 1] - u[r + 1] * v[r];
    }
    return w;
  };
  Tensor y = cross(a.value(), b.value());
  const int aid = a.id(), bid = b.id();
  return a.graph().record(std::move(y), {a, b}, [aid, bid, cross](Graph& g, const Tensor& go) {
    // d(a x b) = da x b + a x db  =>  ga = b x go, gb = go x a.
    if (g.requires_grad(aid)) g.accumulate(aid, cross(g.value(bid), go));
    if (g.requires_grad(bid)) g.accumulate(bid, cross(go, g.value(aid)));
  });
}

Var pairwise_distances(Var points) {
  const Tensor& pv = points.value();
  if (pv.rank() != 2 || pv.dim(1) != 3)
    fail(ErrorCode::ShapeMismatch, "pairwise_distances of " + shape_string(pv.shape()));
  const int m = pv.dim(0);
  Tensor y(Shape{m, m});
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        const double d = pv.at(i, k) - pv.at(j, k);
        s += d * d;
      }
      y.at(i, j) = y.at(j, i) = std::sqrt(s);
    }
  Graph& g = points.graph();
  const int pid = points.id();
  const int yid = static_cast<int>(g.node_count());
  return g.record(std::move(y), {points}, [pid, yid, m](Graph& gr, const Tensor& go) {
    const Tensor& pv2 = gr.value(pid);
    const Tensor& dv = gr.value(yid);
    Tensor gp(pv2.shape());
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        if (i == j || dv.at(i, j) == 0.0) continue;
        const double c = go.at(i, j) / dv.at(i, j);
        for (int k = 0; k < 3; ++k) {
          const double d = c * (pv2.at(i, k) - pv2.at(j, k));
          gp.at(i, k) += d;
          gp.at(j, k) -= d;
        }
      }
    gr.accumulate(pid, gp);
  });
}

// ---------------------------------------------------------- estimators

Var straight_through_sign(Var x) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] >= 0.0 ? 1.0 : -1.0;
  const int xid = x.id();
  return x.graph().record(std::move(y), {x}, [xid](Graph& g, const Tensor& go) { g.accumulate(xid, go); });
}

Var stop_gradient(Var x) { return x.graph().constant(x.value()); }

} // namespace bitfold
