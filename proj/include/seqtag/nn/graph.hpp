#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "seqtag/crf/lattice.hpp"
#include "seqtag/error.hpp"
#include "seqtag/nn/tensor.hpp"
#include "seqtag/random.hpp"

namespace seqtag::nn {

struct Var {
  size_t id = std::numeric_limits<size_t>::max();
};

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = 0.1;
  double eps = 1e-5;
};

namespace kernels {

// c += a * b
inline void matmul_acc(Matrix& c, const Matrix& a, const Matrix& b) {
  for (size_t i = 0; i < a.rows; ++i) {
    double* ci = c.row_ptr(i);
    const double* ai = a.row_ptr(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const double av = ai[k];
      if (av == 0) continue;
      const double* bk = b.row_ptr(k);
      for (size_t j = 0; j < b.cols; ++j) ci[j] += av * bk[j];
    }
  }
}

// da += dc * b^T
inline void matmul_grad_a(Matrix& da, const Matrix& dc, const Matrix& b) {
  for (size_t i = 0; i < dc.rows; ++i) {
    const double* dci = dc.row_ptr(i);
    double* dai = da.row_ptr(i);
    for (size_t k = 0; k < b.rows; ++k) {
      const double* bk = b.row_ptr(k);
      double s = 0;
      for (size_t j = 0; j < dc.cols; ++j) s += dci[j] * bk[j];
      dai[k] += s;
    }
  }
}

// db += a^T * dc
inline void matmul_grad_b(Matrix& db, const Matrix& a, const Matrix& dc) {
  for (size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row_ptr(i);
    const double* dci = dc.row_ptr(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const double av = ai[k];
      if (av == 0) continue;
      double* dbk = db.row_ptr(k);
      for (size_t j = 0; j < dc.cols; ++j) dbk[j] += av * dci[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace kernels

/// Scores of a chain-CRF output layer with START/STOP transitions folded in:
/// transitions is (K+2) x (K+2), START = K, STOP = K+1.
inline crf::ChainScores head_chain_scores(const Matrix& emissions, const Matrix& transitions) {
  const size_t n = emissions.rows, k = emissions.cols;
  if (transitions.rows != k + 2 || transitions.cols != k + 2) {
    throw Error(ErrorKind::DimensionMismatch, "transition matrix must be (K+2) x (K+2)");
  }
  crf::ChainScores s(n, k);
  for (size_t t = 0; t < n; ++t)
    for (size_t j = 0; j < k; ++j) s.u(t, j) = emissions(t, j);
  for (size_t j = 0; j < k; ++j) {
    s.u(0, j) += transitions(k, j);
    s.u(n - 1, j) += transitions(j, k + 1);
  }
  for (size_t t = 1; t < n; ++t)
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < k; ++j) s.p(t, i, j) = transitions(i, j);
  return s;
}

/// Reverse-mode automatic differentiation over matrices. Nodes are appended in
/// evaluation order; backward() walks them in reverse. Parameter nodes read
/// and accumulate directly into their Parameter.
class Graph {
 public:
  explicit Graph(bool training = false, Rng* rng = nullptr) : training_(training), rng_(rng) {}

  bool training() const { return training_; }
  size_t node_count() const { return nodes_.size(); }

  const Matrix& value(Var v) const {
    const auto& n = nodes_[v.id];
    return n.param ? n.param->value : n.value;
  }

  Matrix& grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.param) return n.param->grad;
    if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols) n.grad = Matrix(n.value.rows, n.value.cols);
    return n.grad;
  }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  Var constant(Matrix m) { return push(std::move(m), false, nullptr); }

  Var param(Parameter& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var{it->second};
    Node n;
    n.param = &p;
    n.needs_grad = true;
    if (p.sparse_rows)
      for (size_t r = 0; r < p.value.rows; ++r) p.touched.insert(r);
    nodes_.push_back(std::move(n));
    Var v{nodes_.size() - 1};
    param_ids_.emplace(&p, v.id);
    return v;
  }

  /// Rows of an embedding parameter, n x dim.
  Var embed_rows(Parameter& table, std::span<const size_t> ids) {
    Matrix out(ids.size(), table.value.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= table.value.rows) throw Error(ErrorKind::DimensionMismatch, "embedding row out of range");
      std::copy(table.value.row_ptr(ids[i]), table.value.row_ptr(ids[i]) + out.cols, out.row_ptr(i));
    }
    Var v = push(std::move(out), true, nullptr);
    std::vector<size_t> rows(ids.begin(), ids.end());
    Parameter* p = &table;
    set_backward(v, [this, v, rows, p] {
      const Matrix& g = grad(v);
      for (size_t i = 0; i < rows.size(); ++i) {
        double* dst = p->grad.row_ptr(rows[i]);
        const double* src = g.row_ptr(i);
        for (size_t c = 0; c < g.cols; ++c) dst[c] += src[c];
        p->touched.insert(rows[i]);
      }
    });
    return v;
  }

  Var matmul(Var a, Var b) {
    const Matrix &A = value(a), &B = value(b);
    if (A.cols != B.rows) throw Error(ErrorKind::DimensionMismatch, shape_msg("matmul", A, B));
    Matrix c(A.rows, B.cols);
    kernels::matmul_acc(c, A, B);
    Var v = push(std::move(c), needs_grad(a) || needs_grad(b), nullptr);
    set_backward(v, [this, v, a, b] {
      if (needs_grad(a)) kernels::matmul_grad_a(grad(a), grad(v), value(b));
      if (needs_grad(b)) kernels::matmul_grad_b(grad(b), value(a), grad(v));
    });
    return v;
  }

  /// a + b, where b has a's shape or is a 1 x cols row broadcast over rows.
  Var add(Var a, Var b) {
    const Matrix &A = value(a), &B = value(b);
    bool broadcast = !A.same_shape(B);
    if (broadcast && !(B.rows == 1 && B.cols == A.cols)) throw Error(ErrorKind::DimensionMismatch, shape_msg("add", A, B));
    Matrix c = A;
    for (size_t i = 0; i < c.rows; ++i)
      for (size_t j = 0; j < c.cols; ++j) c(i, j) += broadcast ? B(0, j) : B(i, j);
    Var v = push(std::move(c), needs_grad(a) || needs_grad(b), nullptr);
    set_backward(v, [this, v, a, b, broadcast] {
      const Matrix& g = grad(v);
      if (needs_grad(a)) {
        Matrix& ga = grad(a);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (needs_grad(b)) {
        Matrix& gb = grad(b);
        for (size_t i = 0; i < g.rows; ++i)
          for (size_t j = 0; j < g.cols; ++j) gb(broadcast ? 0 : i, j) += g(i, j);
      }
    });
    return v;
  }

  /// x * W + b for a weight parameter W and a bias row b.
  Var affine(Var x, Parameter& w, Parameter& b) { return add(matmul(x, param(w)), param(b)); }

  Var mul(Var a, Var b) {
    const Matrix &A = value(a), &B = value(b);
    if (!A.same_shape(B)) throw Error(ErrorKind::DimensionMismatch, shape_msg("mul", A, B));
    Matrix c = A;
    for (size_t i = 0; i < c.size(); ++i) c.data[i] *= B.data[i];
    Var v = push(std::move(c), needs_grad(a) || needs_grad(b), nullptr);
    set_backward(v, [this, v, a, b] {
      const Matrix& g = grad(v);
      if (needs_grad(a)) {
        Matrix& ga = grad(a);
        const Matrix& B = value(b);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * B.data[i];
      }
      if (needs_grad(b)) {
        Matrix& gb = grad(b);
        const Matrix& A = value(a);
        for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * A.data[i];
      }
    });
    return v;
  }

  Var tanh(Var a) {
    Matrix c = value(a);
    for (double& x : c.data) x = std::tanh(x);
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a] {
      const Matrix &g = grad(v), &y = value(v);
      Matrix& ga = grad(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * (1 - y.data[i] * y.data[i]);
    });
    return v;
  }

  Var sigmoid(Var a) {
    Matrix c = value(a);
    for (double& x : c.data) x = kernels::sigmoid(x);
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a] {
      const Matrix &g = grad(v), &y = value(v);
      Matrix& ga = grad(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * y.data[i] * (1 - y.data[i]);
    });
    return v;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorKind::DimensionMismatch, "concat of nothing");
    size_t rows = value(parts[0]).rows, cols = 0;
    bool needs = false;
    for (Var p : parts) {
      if (value(p).rows != rows) throw Error(ErrorKind::DimensionMismatch, "concat_cols row mismatch");
      cols += value(p).cols;
      needs = needs || needs_grad(p);
    }
    Matrix c(rows, cols);
    size_t off = 0;
    for (Var p : parts) {
      const Matrix& m = value(p);
      for (size_t i = 0; i < rows; ++i) std::copy(m.row_ptr(i), m.row_ptr(i) + m.cols, c.row_ptr(i) + off);
      off += m.cols;
    }
    Var v = push(std::move(c), needs, nullptr);
    set_backward(v, [this, v, parts] {
      const Matrix& g = grad(v);
      size_t off = 0;
      for (Var p : parts) {
        size_t w = value(p).cols;
        if (needs_grad(p)) {
          Matrix& gp = grad(p);
          for (size_t i = 0; i < g.rows; ++i)
            for (size_t j = 0; j < w; ++j) gp(i, j) += g(i, off + j);
        }
        off += w;
      }
    });
    return v;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorKind::DimensionMismatch, "concat of nothing");
    size_t cols = value(parts[0]).cols, rows = 0;
    bool needs = false;
    for (Var p : parts) {
      if (value(p).cols != cols) throw Error(ErrorKind::DimensionMismatch, "concat_rows column mismatch");
      rows += value(p).rows;
      needs = needs || needs_grad(p);
    }
    Matrix c(rows, cols);
    size_t off = 0;
    for (Var p : parts) {
      const Matrix& m = value(p);
      std::copy(m.data.begin(), m.data.end(), c.data.begin() + static_cast<long>(off * cols));
      off += m.rows;
    }
    Var v = push(std::move(c), needs, nullptr);
    set_backward(v, [this, v, parts] {
      const Matrix& g = grad(v);
      size_t off = 0;
      for (Var p : parts) {
        size_t n = value(p).rows * g.cols;
        if (needs_grad(p)) {
          Matrix& gp = grad(p);
          for (size_t i = 0; i < n; ++i) gp.data[i] += g.data[off + i];
        }
        off += n;
      }
    });
    return v;
  }

  Var slice_cols(Var a, size_t start, size_t len) {
    const Matrix& A = value(a);
    if (start + len > A.cols) throw Error(ErrorKind::DimensionMismatch, "slice_cols out of range");
    Matrix c(A.rows, len);
    for (size_t i = 0; i < A.rows; ++i) std::copy(A.row_ptr(i) + start, A.row_ptr(i) + start + len, c.row_ptr(i));
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a, start, len] {
      const Matrix& g = grad(v);
      Matrix& ga = grad(a);
      for (size_t i = 0; i < g.rows; ++i)
        for (size_t j = 0; j < len; ++j) ga(i, start + j) += g(i, j);
    });
    return v;
  }

  Var slice_rows(Var a, size_t start, size_t len) {
    const Matrix& A = value(a);
    if (start + len > A.rows) throw Error(ErrorKind::DimensionMismatch, "slice_rows out of range");
    Matrix c(len, A.cols);
    std::copy(A.row_ptr(start), A.row_ptr(start) + len * A.cols, c.data.begin());
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a, start] {
      const Matrix& g = grad(v);
      Matrix& ga = grad(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[start * g.cols + i] += g.data[i];
    });
    return v;
  }

  Var row(Var a, size_t i) { return slice_rows(a, i, 1); }

  /// n x d -> n x (width * d): row t holds rows t-left .. t-left+width-1 of
  /// the input side by side, with zero rows outside the sequence.
  Var unfold(Var a, size_t width) {
    const Matrix& A = value(a);
    const size_t n = A.rows, d = A.cols, left = (width - 1) / 2;
    Matrix c(n, width * d);
    for (size_t t = 0; t < n; ++t)
      for (size_t k = 0; k < width; ++k) {
        long src = static_cast<long>(t + k) - static_cast<long>(left);
        if (src < 0 || src >= static_cast<long>(n)) continue;
        std::copy(A.row_ptr(static_cast<size_t>(src)), A.row_ptr(static_cast<size_t>(src)) + d, c.row_ptr(t) + k * d);
      }
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a, width, left] {
      const Matrix& g = grad(v);
      Matrix& ga = grad(a);
      const size_t n = ga.rows, d = ga.cols;
      for (size_t t = 0; t < n; ++t)
        for (size_t k = 0; k < width; ++k) {
          long src = static_cast<long>(t + k) - static_cast<long>(left);
          if (src < 0 || src >= static_cast<long>(n)) continue;
          for (size_t j = 0; j < d; ++j) ga(static_cast<size_t>(src), j) += g(t, k * d + j);
        }
    });
    return v;
  }

  /// Column-wise maximum over rows; ties pick the first row.
  Var max_rows(Var a) {
    const Matrix& A = value(a);
    Matrix c(1, A.cols);
    std::vector<size_t> arg(A.cols, 0);
    for (size_t j = 0; j < A.cols; ++j) {
      c(0, j) = A(0, j);
      for (size_t i = 1; i < A.rows; ++i)
        if (A(i, j) > c(0, j)) c(0, j) = A(i, j), arg[j] = i;
    }
    Var v = push(std::move(c), needs_grad(a), nullptr);
    set_backward(v, [this, v, a, arg] {
      const Matrix& g = grad(v);
      Matrix& ga = grad(a);
      for (size_t j = 0; j < g.cols; ++j) ga(arg[j], j) += g(0, j);
    });
    return v;
  }

  /// Inverted dropout; the identity outside training or for p = 0.
  Var dropout(Var a, double p) {
    if (!training_ || p <= 0) return a;
    if (!rng_) throw Error(ErrorKind::InvalidConfig, "dropout needs a random source");
    Matrix mask(value(a).rows, value(a).cols);
    for (double& m : mask.data) m = rng_->uniform() < p ? 0.0 : 1.0 / (1.0 - p);
    return mul(a, constant(std::move(mask)));
  }

  /// Per-column normalization over all rows (batch positions) in training,
  /// running averages otherwise, followed by gamma * x + beta.
  Var batchnorm(Var a, Parameter& gamma, Parameter& beta, BatchNormStats& stats) {
    const Matrix& A = value(a);
    const size_t n = A.rows, d = A.cols;
    if (gamma.value.cols != d || beta.value.cols != d) throw Error(ErrorKind::DimensionMismatch, "batchnorm width");
    if (stats.mean.size() != d) stats.mean.assign(d, 0.0), stats.var.assign(d, 1.0);
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    if (training_) {
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) mean[j] += A(i, j);
      for (double& m : mean) m /= static_cast<double>(n);
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) var[j] += (A(i, j) - mean[j]) * (A(i, j) - mean[j]);
      for (double& v : var) v /= static_cast<double>(n);
      for (size_t j = 0; j < d; ++j) {
        stats.mean[j] = (1 - stats.momentum) * stats.mean[j] + stats.momentum * mean[j];
        stats.var[j] = (1 - stats.momentum) * stats.var[j] + stats.momentum * var[j];
      }
    } else {
      mean = stats.mean;
      var = stats.var;
    }
    std::vector<double> inv_std(d);
    for (size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + stats.eps);
    Matrix xhat(n, d);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) xhat(i, j) = (A(i, j) - mean[j]) * inv_std[j];
    Var g = param(gamma), b = param(beta);
    Matrix y(n, d);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) y(i, j) = gamma.value(0, j) * xhat(i, j) + beta.value(0, j);
    Var v = push(std::move(y), true, nullptr);
    const bool batch_stats = training_;
    set_backward(v, [this, v, a, g, b, xhat = std::move(xhat), inv_std, batch_stats] {
      const Matrix& dy = grad(v);
      const size_t n = dy.rows, d = dy.cols;
      Matrix& dg = grad(g);
      Matrix& db = grad(b);
      const Matrix& gm = value(g);
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) dg(0, j) += dy(i, j) * xhat(i, j), db(0, j) += dy(i, j);
      if (!needs_grad(a)) return;
      Matrix& da = grad(a);
      for (size_t j = 0; j < d; ++j) {
        if (!batch_stats) {
          for (size_t i = 0; i < n; ++i) da(i, j) += dy(i, j) * gm(0, j) * inv_std[j];
          continue;
        }
        double sum_dx = 0, sum_dx_x = 0;
        for (size_t i = 0; i < n; ++i) {
          double dxh = dy(i, j) * gm(0, j);
          sum_dx += dxh;
          sum_dx_x += dxh * xhat(i, j);
        }
        for (size_t i = 0; i < n; ++i) {
          double dxh = dy(i, j) * gm(0, j);
          da(i, j) += inv_std[j] / static_cast<double>(n) *
                      (static_cast<double>(n) * dxh - sum_dx - xhat(i, j) * sum_dx_x);
        }
      }
    });
    return v;
  }

  Var sum(Var a) {
    double s = 0;
    for (double x : value(a).data) s += x;
    Var v = push(Matrix(1, 1, s), needs_grad(a), nullptr);
    set_backward(v, [this, v, a] {
      double g = grad(v)(0, 0);
      for (double& x : grad(a).data) x += g;
    });
    return v;
  }

  /// Fused recurrent cell: pre-activations [i f g o] (1 x 4h) and the previous
  /// cell (1 x h) -> [hidden | cell] (1 x 2h).
  Var lstm_cell(Var pre, Var c_prev) {
    const Matrix &P = value(pre), &C = value(c_prev);
    const size_t h = C.cols;
    if (P.rows != 1 || C.rows != 1 || P.cols != 4 * h) throw Error(ErrorKind::DimensionMismatch, "lstm_cell shapes");
    std::vector<double> gates(4 * h), tc(h);
    Matrix out(1, 2 * h);
    for (size_t j = 0; j < h; ++j) {
      double i = kernels::sigmoid(P(0, j)), f = kernels::sigmoid(P(0, h + j)), g = std::tanh(P(0, 2 * h + j)),
             o = kernels::sigmoid(P(0, 3 * h + j));
      gates[j] = i, gates[h + j] = f, gates[2 * h + j] = g, gates[3 * h + j] = o;
      double c = f * C(0, j) + i * g;
      tc[j] = std::tanh(c);
      out(0, j) = o * tc[j];
      out(0, h + j) = c;
    }
    Var v = push(std::move(out), needs_grad(pre) || needs_grad(c_prev), nullptr);
    set_backward(v, [this, v, pre, c_prev, gates = std::move(gates), tc = std::move(tc), h] {
      const Matrix& g = grad(v);
      const Matrix& C = value(c_prev);
      Matrix* dp = needs_grad(pre) ? &grad(pre) : nullptr;
      Matrix* dc_prev = needs_grad(c_prev) ? &grad(c_prev) : nullptr;
      for (size_t j = 0; j < h; ++j) {
        double i = gates[j], f = gates[h + j], gg = gates[2 * h + j], o = gates[3 * h + j];
        double dh = g(0, j);
        double dc = g(0, h + j) + dh * o * (1 - tc[j] * tc[j]);
        if (dp) {
          (*dp)(0, j) += dc * gg * i * (1 - i);
          (*dp)(0, h + j) += dc * C(0, j) * f * (1 - f);
          (*dp)(0, 2 * h + j) += dc * i * (1 - gg * gg);
          (*dp)(0, 3 * h + j) += dh * tc[j] * o * (1 - o);
        }
        if (dc_prev) (*dc_prev)(0, j) += dc * f;
      }
    });
    return v;
  }

  /// Sum over rows of -log softmax(logits)[gold].
  Var softmax_nll(Var logits, std::span<const size_t> gold) {
    const Matrix& L = value(logits);
    if (gold.size() != L.rows) throw Error(ErrorKind::DimensionMismatch, "gold length differs from logits rows");
    Matrix probs(L.rows, L.cols);
    double loss = 0;
    for (size_t t = 0; t < L.rows; ++t) {
      if (gold[t] >= L.cols) throw Error(ErrorKind::TagOutOfRange, "gold tag out of range");
      double m = *std::max_element(L.row_ptr(t), L.row_ptr(t) + L.cols), z = 0;
      for (size_t j = 0; j < L.cols; ++j) z += std::exp(L(t, j) - m);
      double log_z = m + std::log(z);
      for (size_t j = 0; j < L.cols; ++j) probs(t, j) = std::exp(L(t, j) - log_z);
      loss += log_z - L(t, gold[t]);
    }
    Var v = push(Matrix(1, 1, loss), needs_grad(logits), nullptr);
    std::vector<size_t> y(gold.begin(), gold.end());
    set_backward(v, [this, v, logits, probs = std::move(probs), y] {
      double g = grad(v)(0, 0);
      Matrix& gl = grad(logits);
      for (size_t t = 0; t < probs.rows; ++t) {
        for (size_t j = 0; j < probs.cols; ++j) gl(t, j) += g * probs(t, j);
        gl(t, y[t]) -= g;
      }
    });
    return v;
  }

  /// log Z - score(gold) of a chain CRF with START/STOP transitions.
  Var crf_nll(Var emissions, Var transitions, std::span<const size_t> gold) {
    const Matrix &E = value(emissions), &T = value(transitions);
    const size_t n = E.rows, k = E.cols;
    if (n == 0) throw Error(ErrorKind::EmptySentence, "empty sentence");
    if (gold.size() != n) throw Error(ErrorKind::DimensionMismatch, "gold length differs from emissions rows");
    for (size_t y : gold)
      if (y >= k) throw Error(ErrorKind::TagOutOfRange, "gold tag out of range");
    auto s = head_chain_scores(E, T);
    auto fb = crf::forward_backward(s);
    double loss = fb.log_z - s.sequence_score(gold);
    auto um = crf::unary_marginals(s, fb);
    auto pm = crf::pairwise_marginals(s, fb);
    Var v = push(Matrix(1, 1, loss), needs_grad(emissions) || needs_grad(transitions), nullptr);
    std::vector<size_t> y(gold.begin(), gold.end());
    set_backward(v, [this, v, emissions, transitions, um = std::move(um), pm = std::move(pm), y, n, k] {
      double g = grad(v)(0, 0);
      if (needs_grad(emissions)) {
        Matrix& ge = grad(emissions);
        for (size_t t = 0; t < n; ++t) {
          for (size_t j = 0; j < k; ++j) ge(t, j) += g * um[t * k + j];
          ge(t, y[t]) -= g;
        }
      }
      if (needs_grad(transitions)) {
        Matrix& gt = grad(transitions);
        for (size_t j = 0; j < k; ++j) {
          gt(k, j) += g * um[j];
          gt(j, k + 1) += g * um[(n - 1) * k + j];
        }
        gt(k, y[0]) -= g;
        gt(y[n - 1], k + 1) -= g;
        for (size_t t = 1; t < n; ++t) {
          for (size_t i = 0; i < k; ++i)
            for (size_t j = 0; j < k; ++j) gt(i, j) += g * pm[(t * k + i) * k + j];
          gt(y[t - 1], y[t]) -= g;
        }
      }
    });
    return v;
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward step.
  void backward(Var loss) {
    const Matrix& L = value(loss);
    if (L.rows != 1 || L.cols != 1) throw Error(ErrorKind::DimensionMismatch, "backward needs a scalar");
    if (!needs_grad(loss)) return;
    grad(loss)(0, 0) += 1.0;
    for (size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || !n.needs_grad || n.param) continue;
      if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols) continue;  // no gradient reached it
      n.backward();
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var push(Matrix value, bool needs, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void set_backward(Var v, std::function<void()> back) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].backward = std::move(back);
  }

  static std::string shape_msg(const char* op, const Matrix& a, const Matrix& b) {
    return std::string(op) + ": " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
           std::to_string(b.rows) + "x" + std::to_string(b.cols);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, size_t> param_ids_;
  bool training_;
  Rng* rng_;
};

}  // namespace seqtag::nn
