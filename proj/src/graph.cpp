#include "advbyte/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "advbyte/error.hpp"

namespace advbyte::ad {

namespace {

void shape_error(std::string_view op, const std::string& detail) {
  fail(ErrorKind::ShapeMismatch, std::string(op) + ": " + detail);
}

// C[rows, cols] += A[rows, inner] * B[inner, cols] with A addressed through
// (row stride, inner stride). Accumulation over `inner` runs in index order
// for every output, so results do not depend on the blocking. Inner steps
// whose A entries are all zero are skipped; PAD windows embed to exact zeros.
void gemm_kernel(const double* A, std::size_t a_row, std::size_t a_inner, const double* B, std::size_t ldb,
                 double* C, std::size_t ldc, std::size_t rows, std::size_t inner, std::size_t cols) {
  constexpr std::size_t RB = 4;
  constexpr std::size_t CB = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += RB) {
    const std::size_t rb = std::min(RB, rows - r0);
    for (std::size_t c0 = 0; c0 < cols; c0 += CB) {
      const std::size_t cb = std::min(CB, cols - c0);
      if (rb == RB && cb == CB) {
        alignas(64) double acc[RB][CB];
        for (std::size_t q = 0; q < RB; ++q)
          for (std::size_t o = 0; o < CB; ++o) acc[q][o] = C[(r0 + q) * ldc + c0 + o];
        const double* a = A + r0 * a_row;
        for (std::size_t p = 0; p < inner; ++p, a += a_inner) {
          const double a0 = a[0], a1 = a[a_row], a2 = a[2 * a_row], a3 = a[3 * a_row];
          if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
          const double* b = B + p * ldb + c0;
          for (std::size_t o = 0; o < CB; ++o) {
            const double bv = b[o];
            acc[0][o] += a0 * bv;
            acc[1][o] += a1 * bv;
            acc[2][o] += a2 * bv;
            acc[3][o] += a3 * bv;
          }
        }
        for (std::size_t q = 0; q < RB; ++q)
          for (std::size_t o = 0; o < CB; ++o) C[(r0 + q) * ldc + c0 + o] = acc[q][o];
      } else {
        for (std::size_t q = 0; q < rb; ++q) {
          double* c = C + (r0 + q) * ldc + c0;
          const double* a = A + (r0 + q) * a_row;
          for (std::size_t p = 0; p < inner; ++p) {
            const double av = a[p * a_inner];
            if (av == 0.0) continue;
            const double* b = B + p * ldb + c0;
            for (std::size_t o = 0; o < cb; ++o) c[o] += av * b[o];
          }
        }
      }
    }
  }
}

// y[m,n] += x[m,k] * w[k,n]
void gemm_acc(const double* x, const double* w, double* y, std::size_t m, std::size_t k,
              std::size_t n) {
  gemm_kernel(x, k, 1, w, n, y, n, m, k, n);
}

// gx[m,k] += dy[m,n] * w[k,n]^T
void gemm_dx(const double* dy, const double* w, double* gx, std::size_t m, std::size_t k,
             std::size_t n) {
  std::vector<double> wt(k * n);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t o = 0; o < n; ++o) wt[o * k + kk] = w[kk * n + o];
  gemm_kernel(dy, n, 1, wt.data(), k, gx, k, m, n, k);
}

// gw[k,n] += x[m,k]^T * dy[m,n]
void gemm_dw(const double* x, const double* dy, double* gw, std::size_t m, std::size_t k,
             std::size_t n) {
  gemm_kernel(x, 1, k, dy, n, gw, n, k, m, n);
}

template <class F>
Var unary(Graph& g, std::string_view op, Var x, F&& forward_fn,
          std::function<double(double x, double y)> derivative) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward_fn(xv[i]);
  return g.record(op, {x}, std::move(out), [x, derivative](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& dy = gr.out_grad(self);
    const Tensor& xv = gr.value(x);
    const Tensor& yv = gr.value(Var{self});
    for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace

Var Graph::input(Tensor value, bool requires_grad) {
  if (!value.all_finite()) fail(ErrorKind::NonFiniteValue, "input contains NaN or Inf");
  Node node;
  node.op = "input";
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    fail(ErrorKind::NonFiniteValue, std::string(op) + " produced NaN or Inf");
  }
  Node node;
  node.op = op;
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](Var v) { return nodes_[v.id].requires_grad; });
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Tensor* Graph::grad_slot(Var v) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return &node.grad;
}

const Tensor& Graph::grad(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Graph::backward(Var output) {
  if (value(output).size() != 1) {
    shape_error("backward", "implicit seed needs a scalar output, got " +
                                shape_string(value(output).shape()));
  }
  backward(output, Tensor(value(output).shape(), 1.0));
}

void Graph::backward(Var output, const Tensor& seed) {
  require_same_shape(value(output), seed, "backward seed");
  if (!seed.all_finite()) fail(ErrorKind::NonFiniteValue, "backward seed contains NaN or Inf");
  for (auto& node : nodes_) node.grad = Tensor();
  if (!nodes_[output.id].requires_grad) return;
  nodes_[output.id].grad = seed;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, i);
  }
  for (std::size_t i = 0; i <= output.id; ++i) {
    if (!nodes_[i].grad.empty() && !nodes_[i].grad.all_finite()) {
      fail(ErrorKind::NonFiniteValue,
           "gradient of " + std::string(nodes_[i].op) + " node contains NaN or Inf");
    }
  }
}

Var identity(Graph& g, Var x) {
  return g.record("identity", {x}, g.value(x), [x](Graph& gr, std::size_t self) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
    }
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  return g.record("reshape", {x}, g.value(x).reshaped(std::move(shape)),
                  [x](Graph& gr, std::size_t self) {
                    if (Tensor* gx = gr.grad_slot(x)) {
                      const Tensor& dy = gr.out_grad(self);
                      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
                    }
                  });
}

Var gather_rows(Graph& g, Var table, std::span<const int> ids) {
  const Tensor& t = g.value(table);
  if (t.rank() != 2) shape_error("gather_rows", "table must be 2-D");
  const std::size_t rows = t.dim(0);
  const std::size_t d = t.dim(1);
  auto index = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      shape_error("gather_rows", "index " + std::to_string(id) + " out of range");
    }
    std::copy_n(t.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  return g.record("gather_rows", {table}, std::move(out), [table, index, d](Graph& gr, std::size_t self) {
    Tensor* gt = gr.grad_slot(table);
    if (!gt) return;
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t i = 0; i < index->size(); ++i) {
      double* dst = gt->data() + static_cast<std::size_t>((*index)[i]) * d;
      const double* src = dy.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    shape_error("matmul", shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  gemm_acc(av.data(), bv.data(), out.data(), m, k, n);
  return g.record("matmul", {a, b}, std::move(out), [a, b, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* ga = gr.grad_slot(a)) gemm_dx(dy.data(), gr.value(b).data(), ga->data(), m, k, n);
    if (Tensor* gb = gr.grad_slot(b)) gemm_dw(gr.value(a).data(), dy.data(), gb->data(), m, k, n);
  });
}

Var transpose(Graph& g, Var a) {
  const Tensor& av = g.value(a);
  if (av.rank() != 2) shape_error("transpose", "needs a 2-D tensor");
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  return g.record("transpose", {a}, std::move(out), [a, m, n](Graph& gr, std::size_t self) {
    if (Tensor* ga = gr.grad_slot(a)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += dy.at(j, i);
    }
  });
}

Var affine(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() < 1 || xv.rank() > 2 || wv.rank() != 2 || bv.rank() != 1 ||
      xv.cols() != wv.dim(0) || bv.dim(0) != wv.dim(1)) {
    shape_error("affine", shape_string(xv.shape()) + " * " + shape_string(wv.shape()) + " + " +
                              shape_string(bv.shape()));
  }
  const std::size_t m = xv.rows(), k = wv.dim(0), n = wv.dim(1);
  Tensor out(xv.rank() == 1 ? Shape{n} : Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(bv.data(), n, out.data() + i * n);
  gemm_acc(xv.data(), wv.data(), out.data(), m, k, n);
  return g.record("affine", {x, w, b}, std::move(out), [x, w, b, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* gx = gr.grad_slot(x)) gemm_dx(dy.data(), gr.value(w).data(), gx->data(), m, k, n);
    if (Tensor* gw = gr.grad_slot(w)) gemm_dw(gr.value(x).data(), dy.data(), gw->data(), m, k, n);
    if (Tensor* gb = gr.grad_slot(b)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < n; ++o) (*gb)[o] += dy[i * n + o];
    }
  });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return g.record("add", {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* ga = gr.grad_slot(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i];
    if (Tensor* gb = gr.grad_slot(b))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i];
  });
}

Var sub(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return g.record("sub", {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* ga = gr.grad_slot(a))
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i];
    if (Tensor* gb = gr.grad_slot(b))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] -= dy[i];
  });
}

Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", {a, b}, std::move(out), [a, b](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* ga = gr.grad_slot(a)) {
      const Tensor& bv = gr.value(b);
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * bv[i];
    }
    if (Tensor* gb = gr.grad_slot(b)) {
      const Tensor& av = gr.value(a);
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * av[i];
    }
  });
}

Var scale(Graph& g, Var x, double factor) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return g.record("scale", {x}, std::move(out), [x, factor](Graph& gr, std::size_t self) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * factor;
    }
  });
}

Var mul_rowwise(Graph& g, Var x, Var v) {
  const Tensor& xv = g.value(x);
  const Tensor& vv = g.value(v);
  if (xv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != xv.dim(1)) {
    shape_error("mul_rowwise", shape_string(xv.shape()) + " * " + shape_string(vv.shape()));
  }
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * vv[j];
  return g.record("mul_rowwise", {x, v}, std::move(out), [x, v, m, n](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& vv = gr.value(v);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += dy[i * n + j] * vv[j];
    }
    if (Tensor* gv = gr.grad_slot(v)) {
      const Tensor& xv = gr.value(x);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gv)[j] += dy[i * n + j] * xv[i * n + j];
    }
  });
}

Var add_colwise(Graph& g, Var x, Var v) {
  const Tensor& xv = g.value(x);
  const Tensor& vv = g.value(v);
  if (xv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != xv.dim(0)) {
    shape_error("add_colwise", shape_string(xv.shape()) + " + " + shape_string(vv.shape()));
  }
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + vv[i];
  return g.record("add_colwise", {x, v}, std::move(out), [x, v, m, n](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* gx = gr.grad_slot(x))
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
    if (Tensor* gv = gr.grad_slot(v))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gv)[i] += dy[i * n + j];
  });
}

Var sigmoid(Graph& g, Var x) {
  return unary(
      g, "sigmoid", x,
      [](double v) {
        const double z = std::exp(-std::fabs(v));
        return v >= 0 ? 1.0 / (1.0 + z) : z / (1.0 + z);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Graph& g, Var x) {
  return unary(
      g, "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double xv, double) { return xv > 0 ? 1.0 : 0.0; });
}

Var exp(Graph& g, Var x) {
  return unary(
      g, "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0)) fail(ErrorKind::NonFiniteValue, "log of non-positive value");
  }
  return unary(
      g, "log", x, [](double v) { return std::log(v); }, [](double xv, double) { return 1.0 / xv; });
}

Var log_clamped(Graph& g, Var x, double eps) {
  return unary(
      g, "log_clamped", x, [eps](double v) { return std::log(std::max(v, eps)); },
      [eps](double xv, double) { return xv > eps ? 1.0 / xv : 0.0; });
}

Var softmax_rows(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() < 1 || xv.rank() > 2) shape_error("softmax_rows", "needs 1-D or 2-D input");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = xv.data() + i * n;
    double* yr = out.data() + i * n;
    const double mx = *std::max_element(xr, xr + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  return g.record("softmax_rows", {x}, std::move(out), [x, m, n](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& dy = gr.out_grad(self);
    const Tensor& y = gr.value(Var{self});
    for (std::size_t i = 0; i < m; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += dy[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += y[i * n + j] * (dy[i * n + j] - inner);
    }
  });
}

Var mean_rows(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || xv.dim(0) == 0) shape_error("mean_rows", "needs a non-empty 2-D tensor");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  return g.record("mean_rows", {x}, std::move(out), [x, m, n](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& dy = gr.out_grad(self);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += dy[j] * inv;
  });
}

Var max_rows(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || xv.dim(0) == 0) shape_error("max_rows", "needs a non-empty 2-D tensor");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  auto arg = std::make_shared<std::vector<std::size_t>>(n, 0);
  Tensor out(Shape{n});
  for (std::size_t j = 0; j < n; ++j) out[j] = xv[j];
  for (std::size_t i = 1; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (xv[i * n + j] > out[j]) {
        out[j] = xv[i * n + j];
        (*arg)[j] = i;
      }
    }
  }
  return g.record("max_rows", {x}, std::move(out), [x, arg, n](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t j = 0; j < n; ++j) (*gx)[(*arg)[j] * n + j] += dy[j];
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double total = 0.0;
  for (double v : xv.values()) total += v;
  return g.record("sum", {x}, Tensor::scalar(total), [x](Graph& gr, std::size_t self) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const double dy = gr.out_grad(self)[0];
      for (auto& v : gx->values()) v += dy;
    }
  });
}

Var sum_cols(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2) shape_error("sum_cols", "needs a 2-D tensor");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += xv[i * n + j];
  return g.record("sum_cols", {x}, std::move(out), [x, m, n](Graph& gr, std::size_t self) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += dy[i];
    }
  });
}

Var dot(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "dot");
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * bv[i];
  return g.record("dot", {a, b}, Tensor::scalar(total), [a, b](Graph& gr, std::size_t self) {
    const double dy = gr.out_grad(self)[0];
    if (Tensor* ga = gr.grad_slot(a)) {
      const Tensor& bv = gr.value(b);
      for (std::size_t i = 0; i < bv.size(); ++i) (*ga)[i] += dy * bv[i];
    }
    if (Tensor* gb = gr.grad_slot(b)) {
      const Tensor& av = gr.value(a);
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += dy * av[i];
    }
  });
}

Var l2_norm(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double total = 0.0;
  for (double v : xv.values()) total += v * v;
  const double norm = std::sqrt(total);
  return g.record("l2_norm", {x}, Tensor::scalar(norm), [x, norm](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx || norm == 0.0) return;  // subgradient 0 at the origin
    const double dy = gr.out_grad(self)[0];
    const Tensor& xv = gr.value(x);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += dy * xv[i] / norm;
  });
}

Var l2_normalize_rows(Graph& g, Var x) {
  constexpr double kMinNorm = 1e-12;
  const Tensor& xv = g.value(x);
  if (xv.rank() < 1 || xv.rank() > 2) shape_error("l2_normalize_rows", "needs 1-D or 2-D input");
  const std::size_t m = xv.rows(), n = xv.cols();
  auto norms = std::make_shared<std::vector<double>>(m);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += xv[i * n + j] * xv[i * n + j];
    const double norm = std::max(std::sqrt(total), kMinNorm);
    (*norms)[i] = norm;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / norm;
  }
  return g.record("l2_normalize_rows", {x}, std::move(out), [x, norms, m, n](Graph& gr, std::size_t self) {
    Tensor* gx = gr.grad_slot(x);
    if (!gx) return;
    const Tensor& dy = gr.out_grad(self);
    const Tensor& y = gr.value(Var{self});
    for (std::size_t i = 0; i < m; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += y[i * n + j] * dy[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        (*gx)[i * n + j] += (dy[i * n + j] - y[i * n + j] * inner) / (*norms)[i];
      }
    }
  });
}

Var concat_rows(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) shape_error("concat_rows", "no inputs");
  const Tensor& first = g.value(parts[0]);
  const std::size_t n = first.cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    if (v.rank() != first.rank() || v.cols() != n || v.rank() < 1 || v.rank() > 2) {
      shape_error("concat_rows", "inconsistent part " + shape_string(v.shape()));
    }
    rows += v.rows();
  }
  Tensor out(Shape{rows, n});
  std::size_t at = 0;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    std::copy(v.values().begin(), v.values().end(), out.data() + at);
    at += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.record("concat_rows", inputs, std::move(out), [inputs](Graph& gr, std::size_t self) {
    const Tensor& dy = gr.out_grad(self);
    std::size_t at = 0;
    for (Var p : inputs) {
      const std::size_t count = gr.value(p).size();
      if (Tensor* gp = gr.grad_slot(p))
        for (std::size_t i = 0; i < count; ++i) (*gp)[i] += dy[at + i];
      at += count;
    }
  });
}

Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || begin > end || end > xv.dim(0)) {
    shape_error("slice_rows", "bad range for " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(1);
  Tensor out(Shape{end - begin, n});
  std::copy_n(xv.data() + begin * n, (end - begin) * n, out.data());
  return g.record("slice_rows", {x}, std::move(out), [x, begin, n](Graph& gr, std::size_t self) {
    if (Tensor* gx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[begin * n + i] += dy[i];
    }
  });
}

}  // namespace advbyte::ad
