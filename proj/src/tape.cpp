#include "npath/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "npath/error.hpp"

namespace npath {
namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_axis(const Tensor& t, std::size_t axis, const char* what) {
  if (axis >= t.rank()) {
    throw DimensionError(std::string(what) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(t.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[p * n + j];
      c[i * k + p] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

void check_column_hook(const Tensor& x, std::size_t col, const std::vector<std::size_t>& rows, const char* what) {
  require_rank(x, 2, what);
  if (col >= x.cols()) {
    throw IndexError(std::string(what) + ": column " + std::to_string(col) + " out of range [0, " +
                     std::to_string(x.cols()) + ")");
  }
  for (auto r : rows) {
    if (r >= x.rows()) {
      throw IndexError(std::string(what) + ": row " + std::to_string(r) + " out of range [0, " +
                       std::to_string(x.rows()) + ")");
    }
  }
}

}  // namespace

Var Tape::push(std::shared_ptr<const Tensor> value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn fn) {
  return push(std::make_shared<const Tensor>(std::move(value)), requires_grad, std::move(fn));
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.index_ >= nodes_.size()) {
    throw UsageError("variable does not belong to this tape");
  }
  return nodes_[v.index_];
}

std::span<double> Tape::grad_buffer(std::size_t index) {
  auto& n = nodes_[index];
  if (n.grad.empty()) n.grad.assign(n.value->numel(), 0.0);
  return n.grad;
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::constant_ref(const Tensor& value) {
  return push(std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>{}, &value), false, nullptr);
}

Var Tape::variable(Tensor value) {
  return push(std::move(value), true, [](Tape&, std::span<const double>) {});
}

Var Tape::variable_ref(const Tensor& value) {
  return push(std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>{}, &value), true,
              [](Tape&, std::span<const double>) {});
}

const Tensor& Tape::value(Var v) const { return *node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const auto& n = node(v);
  if (n.grad.empty()) return Tensor(n.value->shape());
  return Tensor(n.value->shape(), n.grad);
}

void Tape::backward(Var output) {
  const auto& out = node(output);
  if (out.value->numel() != 1) {
    throw UsageError("backward() needs a scalar output, got shape " + shape_string(out.value->shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!out.requires_grad) return;
  grad_buffer(output.index_)[0] = 1.0;
  for (std::size_t i = output.index_ + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    // Copy: the closure may grow other grad buffers, never this one.
    const std::vector<double> g = n.grad;
    n.backward(*this, g);
  }
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_rank(A, 2, "matmul lhs");
  require_rank(B, 2, "matmul rhs");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  Tensor C({m, n});
  gemm_nn(A.data().data(), B.data().data(), C.mutable_data().data(), m, k, n);
  const std::size_t ia = a.index_, ib = b.index_;
  const bool rg = needs(ia) || needs(ib);
  return push(std::move(C), rg, [ia, ib, m, k, n](Tape& t, std::span<const double> g) {
    const double* Av = t.nodes_[ia].value->data().data();
    const double* Bv = t.nodes_[ib].value->data().data();
    if (t.needs(ia)) gemm_nt(g.data(), Bv, t.grad_buffer(ia).data(), m, n, k);
    if (t.needs(ib)) gemm_tn(Av, g.data(), t.grad_buffer(ib).data(), m, k, n);
  });
}

Var Tape::transpose(Var a) {
  const Tensor& A = value(a);
  require_rank(A, 2, "transpose");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = A.at(i, j);
  const std::size_t ia = a.index_;
  return push(std::move(out), needs(ia), [ia, r, c](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const std::size_t ia = a.index_, ib = b.index_;
  const bool rg = needs(ia) || needs(ib);
  if (A.shape() == B.shape()) {
    Tensor out = A;
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += B[i];
    return push(std::move(out), rg, [ia, ib](Tape& t, std::span<const double> g) {
      if (t.needs(ia)) {
        auto ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs(ib)) {
        auto gb = t.grad_buffer(ib);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  if (A.rank() == 2 && B.rank() == 1 && B.numel() == A.cols()) {
    const std::size_t r = A.rows(), c = A.cols();
    Tensor out = A;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) += B[j];
    return push(std::move(out), rg, [ia, ib, r, c](Tape& t, std::span<const double> g) {
      if (t.needs(ia)) {
        auto ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.needs(ib)) {
        auto gb = t.grad_buffer(ib);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
  }
  throw DimensionError("add: incompatible shapes " + shape_string(A.shape()) + " and " + shape_string(B.shape()));
}

Var Tape::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require_same_shape(A, B, "mul");
  Tensor out = A;
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= B[i];
  const std::size_t ia = a.index_, ib = b.index_;
  return push(std::move(out), needs(ia) || needs(ib), [ia, ib](Tape& t, std::span<const double> g) {
    const auto& Av = *t.nodes_[ia].value;
    const auto& Bv = *t.nodes_[ib].value;
    if (t.needs(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (t.needs(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * Av[i];
    }
  });
}

Var Tape::scale(Var a, double factor) {
  Tensor out = value(a);
  for (auto& v : out.mutable_data()) v *= factor;
  const std::size_t ia = a.index_;
  return push(std::move(out), needs(ia), [ia, factor](Tape& t, std::span<const double> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw InvalidParameter("layer_norm: eps must be > 0, got " + std::to_string(eps));
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  if (X.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t width = X.shape().back();
  if (G.rank() != 1 || B.rank() != 1 || G.numel() != width || B.numel() != width) {
    throw DimensionError("layer_norm: gamma/beta must be 1-D of length " + std::to_string(width) + ", got " +
                         shape_string(G.shape()) + " and " + shape_string(B.shape()));
  }
  const std::size_t rows = X.numel() / width;
  auto xhat = std::make_shared<std::vector<double>>(X.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += xr[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(width);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (xr[j] - mean) * rs;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * G[j] + B[j];
    }
  }
  const std::size_t ix = x.index_, ig = gamma.index_, ib = beta.index_;
  const bool rg = needs(ix) || needs(ig) || needs(ib);
  return push(std::move(out), rg, [ix, ig, ib, xhat, rstd, rows, width](Tape& t, std::span<const double> g) {
    const auto& Gv = *t.nodes_[ig].value;
    if (t.needs(ig)) {
      auto gg = t.grad_buffer(ig);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) gg[j] += g[r * width + j] * (*xhat)[r * width + j];
    }
    if (t.needs(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) gb[j] += g[r * width + j];
    }
    if (t.needs(ix)) {
      auto gx = t.grad_buffer(ix);
      const double inv_w = 1.0 / static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          const double dh = g[r * width + j] * Gv[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * width + j];
        }
        mean_dh *= inv_w;
        mean_dh_h *= inv_w;
        for (std::size_t j = 0; j < width; ++j) {
          const double dh = g[r * width + j] * Gv[j];
          gx[r * width + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * width + j] * mean_dh_h);
        }
      }
    }
  });
}

Var Tape::gelu(Var x) {
  const Tensor& X = value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.numel(); ++i) out[i] = gelu_value(X[i]);
  const std::size_t ix = x.index_;
  return push(std::move(out), needs(ix), [ix](Tape& t, std::span<const double> g) {
    const auto& Xv = *t.nodes_[ix].value;
    auto gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_slope(Xv[i]);
  });
}

Var Tape::softmax(Var x, std::size_t axis) {
  const Tensor& X = value(x);
  check_axis(X, axis, "softmax");
  const AxisSplit s = split_at(X.shape(), axis);
  Tensor out(X.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = X[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, X[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(X[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  const std::size_t ix = x.index_;
  Var result = push(std::move(out), needs(ix), nullptr);
  if (needs(ix)) {
    const std::size_t iy = result.index_;
    nodes_[iy].backward = [ix, iy, s](Tape& t, std::span<const double> g) {
      const auto& Y = *t.nodes_[iy].value;
      auto gx = t.grad_buffer(ix);
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * Y[base + i * s.inner];
          for (std::size_t i = 0; i < s.len; ++i) {
            const std::size_t at = base + i * s.inner;
            gx[at] += Y[at] * (g[at] - dot);
          }
        }
      }
    };
  }
  return result;
}

Var Tape::index_select(Var x, std::size_t axis, std::vector<std::size_t> indices) {
  const Tensor& X = value(x);
  check_axis(X, axis, "index_select");
  const AxisSplit s = split_at(X.shape(), axis);
  for (auto i : indices) {
    if (i >= s.len) {
      throw IndexError("index_select: index " + std::to_string(i) + " out of range [0, " + std::to_string(s.len) +
                       ")");
    }
  }
  Shape shape = X.shape();
  shape[axis] = indices.size();
  Tensor out(shape);
  const std::size_t k = indices.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[(o * k + i) * s.inner + in] = X[(o * s.len + indices[i]) * s.inner + in];
  const std::size_t ix = x.index_;
  return push(std::move(out), needs(ix), [ix, s, k, idx = std::move(indices)](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t in = 0; in < s.inner; ++in)
          gx[(o * s.len + idx[i]) * s.inner + in] += g[(o * k + i) * s.inner + in];
  });
}

Var Tape::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Tensor& first = value(parts[0]);
  check_axis(first, axis, "concat");
  Shape shape = first.shape();
  std::vector<std::size_t> lens, ids;
  std::size_t total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    const Tensor& P = value(p);
    if (P.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < P.rank(); ++d) {
      if (d != axis && P.dim(d) != first.dim(d)) {
        throw DimensionError("concat: shapes " + shape_string(first.shape()) + " and " + shape_string(P.shape()) +
                             " differ off the concat axis");
      }
    }
    lens.push_back(P.dim(axis));
    ids.push_back(p.index_);
    total += P.dim(axis);
    rg = rg || needs(p.index_);
  }
  shape[axis] = total;
  const AxisSplit s = split_at(shape, axis);
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& P = value(parts[pi]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < lens[pi]; ++i)
        for (std::size_t in = 0; in < s.inner; ++in)
          out[(o * total + offset + i) * s.inner + in] = P[(o * lens[pi] + i) * s.inner + in];
    offset += lens[pi];
  }
  return push(std::move(out), rg, [ids, lens, s, total](Tape& t, std::span<const double> g) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      if (t.needs(ids[pi])) {
        auto gp = t.grad_buffer(ids[pi]);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < lens[pi]; ++i)
            for (std::size_t in = 0; in < s.inner; ++in)
              gp[(o * lens[pi] + i) * s.inner + in] += g[(o * total + offset + i) * s.inner + in];
      }
      offset += lens[pi];
    }
  });
}

Var Tape::sum(Var x) {
  const Tensor& X = value(x);
  double acc = 0.0;
  for (double v : X.data()) acc += v;
  const std::size_t ix = x.index_;
  return push(Tensor::scalar(acc), needs(ix), [ix](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(ix);
    for (auto& v : gx) v += g[0];
  });
}

Var Tape::cross_entropy(Var logits, std::size_t label) {
  const Tensor& Z = value(logits);
  if (Z.rank() > 2 || Z.rows() != 1) {
    throw DimensionError("cross_entropy: expected a single row of logits, got " + shape_string(Z.shape()));
  }
  if (label >= Z.numel()) throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range");
  double mx = Z[0];
  for (double v : Z.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : Z.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  const std::size_t iz = logits.index_;
  return push(Tensor::scalar(lse - Z[label]), needs(iz), [iz, label, lse](Tape& t, std::span<const double> g) {
    const auto& Zv = *t.nodes_[iz].value;
    auto gz = t.grad_buffer(iz);
    for (std::size_t i = 0; i < Zv.numel(); ++i) {
      const double p = std::exp(Zv[i] - lse);
      gz[i] += g[0] * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

Var Tape::scale_column(Var x, std::size_t col, std::vector<std::size_t> rows, double factor) {
  const Tensor& X = value(x);
  check_column_hook(X, col, rows, "scale_column");
  Tensor out = X;
  const std::size_t c = X.cols();
  for (auto r : rows) out[r * c + col] *= factor;
  const std::size_t ix = x.index_;
  return push(std::move(out), needs(ix), [ix, col, c, factor, rows](Tape& t, std::span<const double> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    for (auto r : rows) gx[r * c + col] += g[r * c + col] * (factor - 1.0);
  });
}

Var Tape::overwrite_column(Var x, std::size_t col, std::vector<std::size_t> rows, Var values) {
  const Tensor& X = value(x);
  const Tensor& V = value(values);
  check_column_hook(X, col, rows, "overwrite_column");
  if (V.numel() != rows.size()) {
    throw DimensionError("overwrite_column: " + std::to_string(rows.size()) + " rows but " +
                         std::to_string(V.numel()) + " values");
  }
  Tensor out = X;
  const std::size_t c = X.cols();
  for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i] * c + col] = V[i];
  const std::size_t ix = x.index_, iv = values.index_;
  return push(std::move(out), needs(ix) || needs(iv), [ix, iv, col, c, rows](Tape& t, std::span<const double> g) {
    if (t.needs(ix)) {
      auto gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      for (auto r : rows) gx[r * c + col] -= g[r * c + col];
    }
    if (t.needs(iv)) {
      auto gv = t.grad_buffer(iv);
      for (std::size_t i = 0; i < rows.size(); ++i) gv[i] += g[rows[i] * c + col];
    }
  });
}

Var Tape::shift_column(Var x, std::size_t col, std::vector<std::size_t> rows, Var delta) {
  const Tensor& X = value(x);
  const Tensor& D = value(delta);
  check_column_hook(X, col, rows, "shift_column");
  if (D.numel() != 1) throw DimensionError("shift_column: delta must be scalar, got " + shape_string(D.shape()));
  Tensor out = X;
  const std::size_t c = X.cols();
  for (auto r : rows) out[r * c + col] += D[0];
  const std::size_t ix = x.index_, id = delta.index_;
  return push(std::move(out), needs(ix) || needs(id), [ix, id, col, c, rows](Tape& t, std::span<const double> g) {
    if (t.needs(ix)) {
      auto gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs(id)) {
      double acc = 0.0;
      for (auto r : rows) acc += g[r * c + col];
      t.grad_buffer(id)[0] += acc;
    }
  });
}

}  // namespace npath
