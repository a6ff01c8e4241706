#pragma once

// Differentiable operations over tsamlt::tensor::Tensor. Every op validates
// shapes, rejects non-finite outputs and, when recording, registers its
// adjoint on the active tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "tsamlt/tensor.hpp"

namespace tsamlt::tensor {

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEpsilon = 1e-5;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

/// Index layout for reducing along one axis: flat = (o * len + l) * inner + i.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
  Shape reduced;  // shape with the axis removed ({1} when nothing is left)
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(shape));
  }
  AxisLayout l;
  for (std::size_t d = 0; d < axis; ++d) l.outer *= shape[d];
  l.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) l.inner *= shape[d];
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d != axis) l.reduced.push_back(shape[d]);
  }
  if (l.reduced.empty()) l.reduced = {1};
  return l;
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  std::vector<double> y(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  Tensor out = make_output(op, x.shape(), std::move(y), {&x});
  on_backward(out, [xn = x.node(), on = out.node(), df] {
    auto gx = grad_of(*xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += on->grad[i] * df(xn->value[i], on->value[i]);
    }
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + to_string(a.shape()) +
                     " x " + to_string(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * bv[p * n + j];
    }
  }
  Tensor out = detail::make_output("matmul", {m, n}, std::move(c), {&a, &b});
  detail::on_backward(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    const auto& g = on->grad;
    if (auto ga = detail::grad_of(*an); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bn->value[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (auto gb = detail::grad_of(*bn); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an->value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a.data()[i * n + j];
  Tensor out = detail::make_output("transpose", {n, m}, std::move(t), {&a});
  detail::on_backward(out, [an = a.node(), on = out.node(), m, n] {
    auto ga = detail::grad_of(*an);
    if (ga.empty()) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[j * m + i];
  });
  return out;
}

/// x·Wᵀ + b for x [m×in], W [out×in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  detail::require_rank(b, 1, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (w.dim(1) != in || b.dim(0) != outd) {
    throw ShapeError("linear: x " + to_string(x.shape()) + ", W " +
                     to_string(w.shape()) + ", b " + to_string(b.shape()));
  }
  std::vector<double> y(m * outd);
  const auto xv = x.data(), wv = w.data(), bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < outd; ++o) {
      double s = bv[o];
      for (std::size_t p = 0; p < in; ++p) s += xv[i * in + p] * wv[o * in + p];
      y[i * outd + o] = s;
    }
  Tensor out = detail::make_output("linear", {m, outd}, std::move(y), {&x, &w, &b});
  detail::on_backward(out, [xn = x.node(), wn = w.node(), bn = b.node(),
                            on = out.node(), m, in, outd] {
    const auto& g = on->grad;
    if (auto gx = detail::grad_of(*xn); !gx.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < outd; ++o) {
          const double gio = g[i * outd + o];
          for (std::size_t p = 0; p < in; ++p) gx[i * in + p] += gio * wn->value[o * in + p];
        }
    }
    if (auto gw = detail::grad_of(*wn); !gw.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < outd; ++o) {
          const double gio = g[i * outd + o];
          for (std::size_t p = 0; p < in; ++p) gw[o * in + p] += gio * xn->value[i * in + p];
        }
    }
    if (auto gb = detail::grad_of(*bn); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < outd; ++o) gb[o] += g[i * outd + o];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  Tensor out = detail::make_output("add", a.shape(), std::move(y), {&a, &b});
  detail::on_backward(out, [an = a.node(), bn = b.node(), on = out.node()] {
    for (Node* n : {an.get(), bn.get()}) {
      auto g = detail::grad_of(*n);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  Tensor out = detail::make_output("sub", a.shape(), std::move(y), {&a, &b});
  detail::on_backward(out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (auto g = detail::grad_of(*an); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    if (auto g = detail::grad_of(*bn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  Tensor out = detail::make_output("mul", a.shape(), std::move(y), {&a, &b});
  detail::on_backward(out, [an = a.node(), bn = b.node(), on = out.node()] {
    if (auto g = detail::grad_of(*an); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->value[i];
    if (auto g = detail::grad_of(*bn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->value[i];
  });
  return out;
}

/// s·x + shift with constant s and shift.
inline Tensor affine(const Tensor& x, double s, double shift) {
  return detail::unary(
      "affine", x, [s, shift](double v) { return s * v + shift; },
      [s](double, double) { return s; });
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
inline Tensor add_scalar(const Tensor& x, double c) { return affine(x, 1.0, c); }
inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

/// Square root; the derivative at exactly 0 is taken as 0.
inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope) {
  return detail::unary(
      "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

/// x[m×n] + v[n] broadcast over rows.
inline Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 2, "add_rowwise");
  detail::require_rank(v, 1, "add_rowwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (v.dim(0) != n) throw ShapeError("add_rowwise: vector length mismatch");
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] + v[j];
  Tensor out = detail::make_output("add_rowwise", {m, n}, std::move(y), {&x, &v});
  detail::on_backward(out, [xn = x.node(), vn = v.node(), on = out.node(), m, n] {
    if (auto g = detail::grad_of(*xn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    if (auto g = detail::grad_of(*vn); !g.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += on->grad[i * n + j];
  });
  return out;
}

/// x[m×n] + v[m] broadcast over columns.
inline Tensor add_colwise(const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 2, "add_colwise");
  detail::require_rank(v, 1, "add_colwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (v.dim(0) != m) throw ShapeError("add_colwise: vector length mismatch");
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] + v[i];
  Tensor out = detail::make_output("add_colwise", {m, n}, std::move(y), {&x, &v});
  detail::on_backward(out, [xn = x.node(), vn = v.node(), on = out.node(), m, n] {
    if (auto g = detail::grad_of(*xn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    if (auto g = detail::grad_of(*vn); !g.empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i] += on->grad[i * n + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = detail::make_output("sum", {1}, {s}, {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node()] {
    auto g = detail::grad_of(*xn);
    for (double& gi : g) gi += on->grad[0];
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis, "sum_axis");
  std::vector<double> y(l.outer * l.inner, 0.0);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.len; ++k)
      for (std::size_t i = 0; i < l.inner; ++i)
        y[o * l.inner + i] += x[(o * l.len + k) * l.inner + i];
  Tensor out = detail::make_output("sum_axis", l.reduced, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), l] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < l.len; ++k)
        for (std::size_t i = 0; i < l.inner; ++i)
          g[(o * l.len + k) * l.inner + i] += on->grad[o * l.inner + i];
  });
  return out;
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const std::size_t len = x.shape().at(axis);
  if (len == 0) throw ShapeError("mean_axis: empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(len));
}

/// Column means of x[m×n] whose value does not depend on row order: each
/// column is summed in ascending value order.
inline Tensor set_mean(const Tensor& x) {
  detail::require_rank(x, 2, "set_mean");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw ShapeError("set_mean: no rows");
  std::vector<double> y(n), column(m);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) column[i] = x[i * n + j];
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (double v : column) s += v;
    y[j] = s / static_cast<double>(m);
  }
  Tensor out = detail::make_output("set_mean", {n}, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), m, n] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += on->grad[j] * inv;
  });
  return out;
}

inline Tensor logsumexp(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis, "logsumexp");
  if (l.len == 0) throw ShapeError("logsumexp: empty axis");
  std::vector<double> y(l.outer * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, x[(o * l.len + k) * l.inner + i]);
      double s = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) s += std::exp(x[(o * l.len + k) * l.inner + i] - mx);
      y[o * l.inner + i] = mx + std::log(s);
    }
  Tensor out = detail::make_output("logsumexp", l.reduced, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), l] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double lse = on->value[o * l.inner + i];
        const double go = on->grad[o * l.inner + i];
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t f = (o * l.len + k) * l.inner + i;
          g[f] += go * std::exp(xn->value[f] - lse);
        }
      }
  });
  return out;
}

/// Softmax along `axis`, computed with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis, "softmax");
  if (l.len == 0) throw ShapeError("softmax: empty axis");
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, x[(o * l.len + k) * l.inner + i]);
      double s = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) {
        const std::size_t f = (o * l.len + k) * l.inner + i;
        y[f] = std::exp(x[f] - mx);
        s += y[f];
      }
      for (std::size_t k = 0; k < l.len; ++k) y[(o * l.len + k) * l.inner + i] /= s;
    }
  Tensor out = detail::make_output("softmax", x.shape(), std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), l] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t f = (o * l.len + k) * l.inner + i;
          dot += on->grad[f] * on->value[f];
        }
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t f = (o * l.len + k) * l.inner + i;
          g[f] += on->value[f] * (on->grad[f] - dot);
        }
      }
  });
  return out;
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis, "log_softmax");
  if (l.len == 0) throw ShapeError("log_softmax: empty axis");
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) mx = std::max(mx, x[(o * l.len + k) * l.inner + i]);
      double s = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) s += std::exp(x[(o * l.len + k) * l.inner + i] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t k = 0; k < l.len; ++k) {
        const std::size_t f = (o * l.len + k) * l.inner + i;
        y[f] = x[f] - lse;
      }
    }
  Tensor out = detail::make_output("log_softmax", x.shape(), std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), l] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t i = 0; i < l.inner; ++i) {
        double gs = 0.0;
        for (std::size_t k = 0; k < l.len; ++k) gs += on->grad[(o * l.len + k) * l.inner + i];
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t f = (o * l.len + k) * l.inner + i;
          g[f] += on->grad[f] - std::exp(on->value[f]) * gs;
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  Tensor out = detail::make_output("reshape", std::move(shape), std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node()] {
    auto g = detail::grad_of(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
  });
  return out;
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " +
                       to_string(s));
    }
    lens.push_back(s[axis]);
    shape[axis] += s[axis];
  }
  const auto l = detail::axis_layout(shape, axis, "concat");
  std::vector<double> y(numel(shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < lens[p]; ++k)
        for (std::size_t i = 0; i < l.inner; ++i)
          y[(o * l.len + offset + k) * l.inner + i] = v[(o * lens[p] + k) * l.inner + i];
    offset += lens[p];
  }
  Tensor out = detail::make_output("concat", shape, std::move(y), parts);
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  detail::on_backward(out, [nodes, lens, l, on = out.node()] {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      if (auto g = detail::grad_of(*nodes[p]); !g.empty()) {
        for (std::size_t o = 0; o < l.outer; ++o)
          for (std::size_t k = 0; k < lens[p]; ++k)
            for (std::size_t i = 0; i < l.inner; ++i)
              g[(o * lens[p] + k) * l.inner + i] += on->grad[(o * l.len + offset + k) * l.inner + i];
      }
      offset += lens[p];
    }
  });
  return out;
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto l = detail::axis_layout(x.shape(), axis, "slice");
  if (begin > end || end > l.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of extent " + std::to_string(l.len));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t n = end - begin;
  std::vector<double> y(numel(shape));
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < l.inner; ++i)
        y[(o * n + k) * l.inner + i] = x[(o * l.len + begin + k) * l.inner + i];
  Tensor out = detail::make_output("slice", shape, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), l, begin, n] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < l.inner; ++i)
          g[(o * l.len + begin + k) * l.inner + i] += on->grad[(o * n + k) * l.inner + i];
  });
  return out;
}

/// out[i] = x[i][index[i]] for x[m×n].
inline Tensor pick(const Tensor& x, const std::vector<std::size_t>& index) {
  detail::require_rank(x, 2, "pick");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index.size() != m) throw ShapeError("pick: one index per row required");
  std::vector<double> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw ShapeError("pick: index out of range");
    y[i] = x[i * n + index[i]];
  }
  Tensor out = detail::make_output("pick", {m}, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), index, n] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t i = 0; i < index.size(); ++i) g[i * n + index[i]] += on->grad[i];
  });
  return out;
}

/// Sliding windows of width `kernel` along time with zero padding:
/// x[T×C] -> [T×(kernel·C)], column block j holds x[t + j - kernel/2].
inline Tensor unfold_time(const Tensor& x, std::size_t kernel) {
  detail::require_rank(x, 2, "unfold_time");
  if (kernel == 0 || kernel % 2 == 0) throw ShapeError("unfold_time: kernel must be odd");
  const std::size_t t_len = x.dim(0), c = x.dim(1);
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  const std::size_t width = kernel * c;
  std::vector<double> y(t_len * width, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < kernel; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
      for (std::size_t ch = 0; ch < c; ++ch)
        y[t * width + j * c + ch] = x[static_cast<std::size_t>(src) * c + ch];
    }
  Tensor out = detail::make_output("unfold_time", {t_len, width}, std::move(y), {&x});
  detail::on_backward(out, [xn = x.node(), on = out.node(), t_len, c, kernel, pad, width] {
    auto g = detail::grad_of(*xn);
    if (g.empty()) return;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < kernel; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
        for (std::size_t ch = 0; ch < c; ++ch)
          g[static_cast<std::size_t>(src) * c + ch] += on->grad[t * width + j * c + ch];
      }
  });
  return out;
}

/// Squared Euclidean distances between rows: a[n×d], b[m×d] -> [n×m].
inline Tensor pairwise_sq_distance(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "pairwise_sq_distance");
  detail::require_rank(b, 2, "pairwise_sq_distance");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw ShapeError("pairwise_sq_distance: feature dims differ");
  std::vector<double> y(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[i * d + k] - b[j * d + k];
        s += diff * diff;
      }
      y[i * m + j] = s;
    }
  Tensor out = detail::make_output("pairwise_sq_distance", {n, m}, std::move(y), {&a, &b});
  detail::on_backward(out, [an = a.node(), bn = b.node(), on = out.node(), n, m, d] {
    auto ga = detail::grad_of(*an);
    auto gb = detail::grad_of(*bn);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double g = 2.0 * on->grad[i * m + j];
        if (g == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = an->value[i * d + k] - bn->value[j * d + k];
          if (!ga.empty()) ga[i * d + k] += g * diff;
          if (!gb.empty()) gb[j * d + k] -= g * diff;
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row normalization of x[m×d] with learnable scale and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kNormEpsilon) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (d < 2) throw ShapeError("layer_norm: feature dimension must be >= 2");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: scale/shift must have shape [" + std::to_string(d) + "]");
  }
  std::vector<double> xhat(m * d), inv_std(m), y(m * d);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += x[i * d + k];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (x[i * d + k] - mu) * (x[i * d + k] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < d; ++k) {
      xhat[i * d + k] = (x[i * d + k] - mu) * inv_std[i];
      y[i * d + k] = gamma[k] * xhat[i * d + k] + beta[k];
    }
  }
  Tensor out = detail::make_output("layer_norm", {m, d}, std::move(y), {&x, &gamma, &beta});
  detail::on_backward(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                            on = out.node(), xhat = std::move(xhat),
                            inv_std = std::move(inv_std), m, d] {
    const auto& g = on->grad;
    auto gg = detail::grad_of(*gn);
    auto gb = detail::grad_of(*bn);
    auto gx = detail::grad_of(*xn);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < m; ++i) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t f = i * d + k;
        if (!gg.empty()) gg[k] += g[f] * xhat[f];
        if (!gb.empty()) gb[k] += g[f];
        dxhat[k] = g[f] * gn->value[k];
        mean_dxhat += dxhat[k];
        mean_dxhat_xhat += dxhat[k] * xhat[f];
      }
      if (gx.empty()) continue;
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t f = i * d + k;
        gx[f] += inv_std[i] * (dxhat[k] - mean_dxhat - xhat[f] * mean_dxhat_xhat);
      }
    }
  });
  return out;
}

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (divides by batch size)
};

/// Training-mode batch normalization over the rows of x[B×F].
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               BatchStats* stats = nullptr, double eps = kNormEpsilon) {
  detail::require_rank(x, 2, "batch_norm");
  const std::size_t b = x.dim(0), f = x.dim(1);
  if (b < 2) throw ShapeError("batch_norm: training mode needs batch size >= 2");
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f}) {
    throw ShapeError("batch_norm: scale/shift must have shape [" + std::to_string(f) + "]");
  }
  std::vector<double> mu(f, 0.0), var(f, 0.0), inv_std(f), xhat(b * f), y(b * f);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < f; ++k) mu[k] += x[i * f + k];
  for (auto& v : mu) v /= static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < f; ++k) var[k] += (x[i * f + k] - mu[k]) * (x[i * f + k] - mu[k]);
  for (auto& v : var) v /= static_cast<double>(b);
  for (std::size_t k = 0; k < f; ++k) inv_std[k] = 1.0 / std::sqrt(var[k] + eps);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < f; ++k) {
      xhat[i * f + k] = (x[i * f + k] - mu[k]) * inv_std[k];
      y[i * f + k] = gamma[k] * xhat[i * f + k] + beta[k];
    }
  if (stats) *stats = {mu, var};
  Tensor out = detail::make_output("batch_norm", {b, f}, std::move(y), {&x, &gamma, &beta});
  detail::on_backward(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                            on = out.node(), xhat = std::move(xhat),
                            inv_std = std::move(inv_std), b, f] {
    const auto& g = on->grad;
    auto gg = detail::grad_of(*gn);
    auto gb = detail::grad_of(*bn);
    auto gx = detail::grad_of(*xn);
    for (std::size_t k = 0; k < f; ++k) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = i * f + k;
        if (!gg.empty()) gg[k] += g[idx] * xhat[idx];
        if (!gb.empty()) gb[k] += g[idx];
        const double dxh = g[idx] * gn->value[k];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[idx];
      }
      if (gx.empty()) continue;
      mean_dxhat /= static_cast<double>(b);
      mean_dxhat_xhat /= static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = i * f + k;
        const double dxh = g[idx] * gn->value[k];
        gx[idx] += inv_std[k] * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
      }
    }
  });
  return out;
}

/// Evaluation-mode batch normalization with fixed running statistics.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              std::span<const double> running_mean,
                              std::span<const double> running_var,
                              double eps = kNormEpsilon) {
  detail::require_rank(x, 2, "batch_norm");
  const std::size_t b = x.dim(0), f = x.dim(1);
  if (gamma.shape() != Shape{f} || beta.shape() != Shape{f} ||
      running_mean.size() != f || running_var.size() != f) {
    throw ShapeError("batch_norm: parameter extents disagree with features");
  }
  std::vector<double> inv_std(f), y(b * f);
  for (std::size_t k = 0; k < f; ++k) inv_std[k] = 1.0 / std::sqrt(running_var[k] + eps);
  std::vector<double> rm(running_mean.begin(), running_mean.end());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < f; ++k)
      y[i * f + k] = gamma[k] * (x[i * f + k] - rm[k]) * inv_std[k] + beta[k];
  Tensor out = detail::make_output("batch_norm", {b, f}, std::move(y), {&x, &gamma, &beta});
  detail::on_backward(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                            on = out.node(), inv_std = std::move(inv_std),
                            rm = std::move(rm), b, f] {
    const auto& g = on->grad;
    auto gg = detail::grad_of(*gn);
    auto gb = detail::grad_of(*bn);
    auto gx = detail::grad_of(*xn);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < f; ++k) {
        const std::size_t idx = i * f + k;
        if (!gg.empty()) gg[k] += g[idx] * (xn->value[idx] - rm[k]) * inv_std[k];
        if (!gb.empty()) gb[k] += g[idx];
        if (!gx.empty()) gx[idx] += g[idx] * gn->value[k] * inv_std[k];
      }
  });
  return out;
}

}  // namespace tsamlt::tensor
