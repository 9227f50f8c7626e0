#include "attbalance/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

namespace attbalance {

namespace {

using ConstMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

bool tracking(const Tensor& a) {
  return Tape::active().recording() && a.requires_grad();
}

struct BinaryLayout {
  Shape out_shape;
  bool a_scalar = false;
  bool b_scalar = false;
};

BinaryLayout binary_layout(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a.shape()};
  if (b.numel() == 1) return {a.shape(), false, true};
  if (a.numel() == 1) return {b.shape(), true, false};
  throw DimensionError(std::string(op) + ": incompatible shapes " +
                       shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfda, DB dfdb) {
  const BinaryLayout lay = binary_layout(name, a, b);
  Tensor out = Tensor::zeros(lay.out_shape);
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  const std::size_t n = od.size();
  for (std::size_t i = 0; i < n; ++i) {
    od[i] = f(ad[lay.a_scalar ? 0 : i], bd[lay.b_scalar ? 0 : i]);
  }
  if (Tape::active().recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    const bool as = lay.a_scalar;
    const bool bs = lay.b_scalar;
    Tape::active().record([a = a, b = b, out, as, bs, dfda, dfdb]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      const auto& av = a.data();
      const auto& bv = b.data();
      const std::size_t m = g->size();
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          ga[as ? 0 : i] += (*g)[i] * dfda(av[as ? 0 : i], bv[bs ? 0 : i]);
        }
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          gb[bs ? 0 : i] += (*g)[i] * dfdb(av[as ? 0 : i], bv[bs ? 0 : i]);
        }
      }
    });
  }
  return out;
}

// dfdx receives the input and output value of the element.
template <typename F, typename D>
Tensor unary_op(const Tensor& x, F f, D dfdx) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  const std::size_t n = od.size();
  for (std::size_t i = 0; i < n; ++i) od[i] = f(xd[i]);
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, dfdx]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      if (!x.requires_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& xv = x.data();
      const auto& ov = out.data();
      for (std::size_t i = 0; i < g->size(); ++i) {
        gx[i] += (*g)[i] * dfdx(xv[i], ov[i]);
      }
    });
  }
  return out;
}

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const char* op, const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
  }
  AxisLayout lay;
  const auto& s = x.shape();
  for (int d = 0; d < axis; ++d) lay.outer *= static_cast<std::size_t>(s[d]);
  lay.n = static_cast<std::size_t>(s[axis]);
  for (int d = axis + 1; d < x.rank(); ++d) lay.inner *= static_cast<std::size_t>(s[d]);
  return lay;
}

void check_rank2(const char* op, const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got shape " +
                         shape_str(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor log(const Tensor& x, double floor) {
  return unary_op(
      x, [floor](double v) { return std::log(v < floor ? floor : v); },
      [floor](double v, double) { return v < floor ? 0.0 : 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (const double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      for (auto& v : gx) v += (*g)[0];
    });
  }
  return out;
}

Tensor mean_over_axis(const Tensor& x, int axis) {
  const AxisLayout lay = axis_layout("mean_over_axis", x, axis);
  Shape out_shape;
  for (int d = 0; d < x.rank(); ++d) {
    if (d != axis) out_shape.push_back(x.shape()[d]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < lay.outer; ++o) {
    for (std::size_t in = 0; in < lay.inner; ++in) {
      double s = 0.0;
      for (std::size_t i = 0; i < lay.n; ++i) {
        s += xd[(o * lay.n + i) * lay.inner + in];
      }
      od[o * lay.inner + in] = s / static_cast<double>(lay.n);
    }
  }
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, lay]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      const double inv_n = 1.0 / static_cast<double>(lay.n);
      for (std::size_t o = 0; o < lay.outer; ++o) {
        for (std::size_t in = 0; in < lay.inner; ++in) {
          const double gv = (*g)[o * lay.inner + in] * inv_n;
          for (std::size_t i = 0; i < lay.n; ++i) {
            gx[(o * lay.n + i) * lay.inner + in] += gv;
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const AxisLayout lay = axis_layout("softmax", x, axis);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < lay.outer; ++o) {
    for (std::size_t in = 0; in < lay.inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < lay.n; ++i) {
        mx = std::max(mx, xd[(o * lay.n + i) * lay.inner + in]);
      }
      double denom = 0.0;
      for (std::size_t i = 0; i < lay.n; ++i) {
        const std::size_t idx = (o * lay.n + i) * lay.inner + in;
        od[idx] = std::exp(xd[idx] - mx);
        denom += od[idx];
      }
      for (std::size_t i = 0; i < lay.n; ++i) {
        od[(o * lay.n + i) * lay.inner + in] /= denom;
      }
    }
  }
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, lay]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      const auto& y = out.data();
      for (std::size_t o = 0; o < lay.outer; ++o) {
        for (std::size_t in = 0; in < lay.inner; ++in) {
          double dot = 0.0;
          for (std::size_t i = 0; i < lay.n; ++i) {
            const std::size_t idx = (o * lay.n + i) * lay.inner + in;
            dot += (*g)[idx] * y[idx];
          }
          for (std::size_t i = 0; i < lay.n; ++i) {
            const std::size_t idx = (o * lay.n + i) * lay.inner + in;
            gx[idx] += y[idx] * ((*g)[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), x.data());
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  check_rank2("transpose", x);
  const int m = x.shape()[0];
  const int n = x.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  ConstMap X(x.data().data(), m, n);
  MutMap O(out.data().data(), n, m);
  O = X.transpose();
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, m, n]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      ConstMap G(g->data(), n, m);
      MutMap GX(gx.data(), m, n);
      GX += G.transpose();
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  check_rank2("slice_rows", x);
  const int m = x.shape()[0];
  const int n = x.shape()[1];
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + ", " +
                         std::to_string(r1) + ") invalid for shape " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({r1 - r0, n});
  const auto& xd = x.data();
  auto& od = out.data();
  std::copy(xd.begin() + static_cast<std::ptrdiff_t>(r0) * n,
            xd.begin() + static_cast<std::ptrdiff_t>(r1) * n, od.begin());
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, r0, n]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      const std::size_t base = static_cast<std::size_t>(r0) * static_cast<std::size_t>(n);
      for (std::size_t i = 0; i < g->size(); ++i) gx[base + i] += (*g)[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  check_rank2("slice_cols", x);
  const int m = x.shape()[0];
  const int n = x.shape()[1];
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw DimensionError("slice_cols: range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") invalid for shape " + shape_str(x.shape()));
  }
  const int w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  const auto& xd = x.data();
  auto& od = out.data();
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < w; ++c) {
      od[static_cast<std::size_t>(r) * w + c] =
          xd[static_cast<std::size_t>(r) * n + c0 + c];
    }
  }
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out, m, n, c0, w]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      for (int r = 0; r < m; ++r) {
        for (int c = 0; c < w; ++c) {
          gx[static_cast<std::size_t>(r) * n + c0 + c] +=
              (*g)[static_cast<std::size_t>(r) * w + c];
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  check_rank2("concat_rows", parts[0]);
  const int n = parts[0].shape()[1];
  int rows = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    check_rank2("concat_rows", p);
    if (p.shape()[1] != n) {
      throw DimensionError("concat_rows: column mismatch between " +
                           shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
    }
    rows += p.shape()[0];
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({rows, n});
  auto& od = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  if (Tape::active().recording() && needs_grad) {
    out.set_requires_grad(true);
    Tape::active().record([parts = parts, out]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      std::size_t base = 0;
      for (auto& p : parts) {
        const std::size_t len = p.numel();
        if (p.requires_grad()) {
          auto& gp = p.ensure_grad();
          for (std::size_t i = 0; i < len; ++i) gp[i] += (*g)[base + i];
        }
        base += len;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  check_rank2("concat_cols", parts[0]);
  const int m = parts[0].shape()[0];
  int cols = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    check_rank2("concat_cols", p);
    if (p.shape()[0] != m) {
      throw DimensionError("concat_cols: row mismatch between " +
                           shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
    }
    cols += p.shape()[1];
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, cols});
  auto& od = out.data();
  int coff = 0;
  for (const auto& p : parts) {
    const int w = p.shape()[1];
    const auto& pd = p.data();
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < w; ++c) {
        od[static_cast<std::size_t>(r) * cols + coff + c] =
            pd[static_cast<std::size_t>(r) * w + c];
      }
    }
    coff += w;
  }
  if (Tape::active().recording() && needs_grad) {
    out.set_requires_grad(true);
    Tape::active().record([parts = parts, out, m, cols]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      int base = 0;
      for (auto& p : parts) {
        const int w = p.shape()[1];
        if (p.requires_grad()) {
          auto& gp = p.ensure_grad();
          for (int r = 0; r < m; ++r) {
            for (int c = 0; c < w; ++c) {
              gp[static_cast<std::size_t>(r) * w + c] +=
                  (*g)[static_cast<std::size_t>(r) * cols + base + c];
            }
          }
        }
        base += w;
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check_rank2("gather_rows", table);
  const int v = table.shape()[0];
  const int d = table.shape()[1];
  for (const int id : ids) {
    if (id < 0 || id >= v) {
      throw DimensionError("gather_rows: row id " + std::to_string(id) +
                           " out of range for table " + shape_str(table.shape()));
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  const auto& td = table.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(td.begin() + static_cast<std::ptrdiff_t>(ids[i]) * d,
              td.begin() + static_cast<std::ptrdiff_t>(ids[i] + 1) * d,
              od.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  if (tracking(table)) {
    out.set_requires_grad(true);
    Tape::active().record([table = table, out, ids, d]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gt = table.ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int c = 0; c < d; ++c) {
          gt[static_cast<std::size_t>(ids[i]) * d + c] +=
              (*g)[i * static_cast<std::size_t>(d) + c];
        }
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& row) {
  check_rank2("add_rowvec", x);
  const int m = x.shape()[0];
  const int n = x.shape()[1];
  if (static_cast<int>(row.numel()) != n) {
    throw DimensionError("add_rowvec: row vector " + shape_str(row.shape()) +
                         " does not match matrix " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  const auto& xd = x.data();
  const auto& rd = row.data();
  auto& od = out.data();
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) {
      od[static_cast<std::size_t>(r) * n + c] = xd[static_cast<std::size_t>(r) * n + c] + rd[c];
    }
  }
  if (Tape::active().recording() && (x.requires_grad() || row.requires_grad())) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, row = row, out, m, n]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      if (x.requires_grad()) {
        auto& gx = x.ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i];
      }
      if (row.requires_grad()) {
        auto& gr = row.ensure_grad();
        for (int r = 0; r < m; ++r) {
          for (int c = 0; c < n; ++c) gr[c] += (*g)[static_cast<std::size_t>(r) * n + c];
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2("matmul", a);
  check_rank2("matmul", b);
  const int m = a.shape()[0];
  const int k = a.shape()[1];
  const int n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  ConstMap A(a.data().data(), m, k);
  ConstMap B(b.data().data(), k, n);
  MutMap C(out.data().data(), m, n);
  C.noalias() = A * B;
  if (Tape::active().recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tape::active().record([a = a, b = b, out, m, k, n]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      ConstMap G(g->data(), m, n);
      if (a.requires_grad()) {
        MutMap GA(a.ensure_grad().data(), m, k);
        ConstMap B2(b.data().data(), k, n);
        GA.noalias() += G * B2.transpose();
      }
      if (b.requires_grad()) {
        MutMap GB(b.ensure_grad().data(), k, n);
        ConstMap A2(a.data().data(), m, k);
        GB.noalias() += A2.transpose() * G;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_rank2("layer_norm", x);
  const int m = x.shape()[0];
  const int n = x.shape()[1];
  if (static_cast<int>(gamma.numel()) != n || static_cast<int>(beta.numel()) != n) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width of " +
                         shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> xhat(static_cast<std::size_t>(m) * n);
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  auto& od = out.data();
  for (int r = 0; r < m; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * n;
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += xd[base + c];
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = xd[base + c] - mu;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    for (int c = 0; c < n; ++c) {
      const double h = (xd[base + c] - mu) * inv;
      xhat[base + c] = h;
      od[base + c] = h * gd[c] + bd[c];
    }
  }
  if (Tape::active().recording() &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    Tape::active().record(
        [x = x, gamma = gamma, beta = beta, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
          const auto* g = out.grad_ptr();
          if (!g) return;
          const auto& gd = gamma.data();
          for (int r = 0; r < m; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * n;
            if (gamma.requires_grad()) {
              auto& gg = gamma.ensure_grad();
              for (int c = 0; c < n; ++c) gg[c] += (*g)[base + c] * xhat[base + c];
            }
            if (beta.requires_grad()) {
              auto& gb = beta.ensure_grad();
              for (int c = 0; c < n; ++c) gb[c] += (*g)[base + c];
            }
            if (x.requires_grad()) {
              auto& gx = x.ensure_grad();
              double m1 = 0.0;
              double m2 = 0.0;
              for (int c = 0; c < n; ++c) {
                const double dxhat = (*g)[base + c] * gd[c];
                m1 += dxhat;
                m2 += dxhat * xhat[base + c];
              }
              m1 /= n;
              m2 /= n;
              const double inv = inv_std[static_cast<std::size_t>(r)];
              for (int c = 0; c < n; ++c) {
                const double dxhat = (*g)[base + c] * gd[c];
                gx[base + c] += inv * (dxhat - m1 - xhat[base + c] * m2);
              }
            }
          }
        });
  }
  return out;
}

Tensor with_corrupted_gradient(const Tensor& x) {
  Tensor out = Tensor::from_data(x.shape(), x.data());
  if (tracking(x)) {
    out.set_requires_grad(true);
    Tape::active().record([x = x, out]() mutable {
      const auto* g = out.grad_ptr();
      if (!g) return;
      auto& gx = x.ensure_grad();
      // Wrong on purpose: true rule is gx += g.
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += 1.5 * (*g)[i] + 1e-3;
    });
  }
  return out;
}

}  // namespace attbalance
