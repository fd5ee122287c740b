#include "dtmerge/autodiff.hpp"

#include <cblas.h>
#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dtmerge/rng.hpp"

namespace dtm::ad {

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha, const float* a, int64_t lda,
          const float* b, int64_t ldb, float beta, float* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) c[i * ldc + j] = beta == 0.0f ? 0.0f : beta * c[i * ldc + j];
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<blasint>(m), static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c, static_cast<blasint>(ldc));
}

namespace {

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

int64_t rows_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.numel() / t.dim(-1); }

void add_into(Tensor& dst, const Tensor& src) {
  float* d = dst.mutable_ptr();
  const float* s = src.ptr();
  for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

}  // namespace

namespace {

// Activations are allocated and released every step. Keeping freed blocks in the heap
// (instead of returning them to the OS via munmap) avoids page faults on each reuse.
void keep_heap_warm() {
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
}

}  // namespace

Graph::Graph(GraphOptions options) : options_(options) {
  keep_heap_warm();
  nodes_.reserve(256);
}

Graph::Node& Graph::node(Var v) {
  if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw Error("graph: invalid variable handle");
  return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw Error("graph: invalid variable handle");
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Graph::grad(Var v) {
  Node& n = node(v);
  if (n.grad.shape() != n.value.shape() || n.grad.numel() != n.value.numel()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Graph::push(Tensor value, std::string_view op, std::initializer_list<Var> inputs,
                std::function<void(Graph&, const Tensor&)> backward) {
  if (consumed_) throw Error("graph: recording on a consumed graph");
  if (!value.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite output");
  Node n;
  n.value = std::move(value);
  for (Var in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("input: non-finite value");
  return push(std::move(value), "input", {}, nullptr);
}

Var Graph::parameter(const std::string& name, Tensor value, bool trainable) {
  if (!value.all_finite()) throw NonFiniteError("parameter " + name + ": non-finite value");
  Var v = push(std::move(value), "parameter", {}, nullptr);
  Node& n = node(v);
  n.name = name;
  n.trainable_param = trainable;
  n.requires_grad = trainable;
  return v;
}

Var Graph::matmul(Var a, Var w) {
  const Tensor& A = value(a);
  const Tensor& W = value(w);
  if (W.rank() != 2 || A.rank() < 1 || A.dim(-1) != W.dim(0)) throw ShapeError("matmul", A.shape(), W.shape());
  const int64_t rows = rows_of(A), k = W.dim(0), n = W.dim(1);
  Shape out_shape = A.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  gemm(false, false, rows, n, k, 1.0f, A.ptr(), k, W.ptr(), n, 0.0f, out.mutable_ptr(), n);
  return push(std::move(out), "matmul", {a, w}, [a, w, rows, k, n](Graph& g, const Tensor& go) {
    if (g.requires_grad(a)) {
      gemm(false, true, rows, k, n, 1.0f, go.ptr(), n, g.value(w).ptr(), n, 1.0f, g.grad(a).mutable_ptr(), k);
    }
    if (g.requires_grad(w)) {
      gemm(true, false, k, n, rows, 1.0f, g.value(a).ptr(), k, go.ptr(), n, 1.0f, g.grad(w).mutable_ptr(), n);
    }
  });
}

Var Graph::bmm(Var a, Var b, bool transpose_b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0)) throw ShapeError("bmm", A.shape(), B.shape());
  const int64_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
  const int64_t n = transpose_b ? B.dim(1) : B.dim(2);
  if ((transpose_b ? B.dim(2) : B.dim(1)) != k) throw ShapeError("bmm", A.shape(), B.shape());
  Tensor out({batch, m, n});
  for (int64_t i = 0; i < batch; ++i) {
    gemm(false, transpose_b, m, n, k, 1.0f, A.ptr() + i * m * k, k, B.ptr() + i * k * n, transpose_b ? k : n, 0.0f,
         out.mutable_ptr() + i * m * n, n);
  }
  return push(std::move(out), "bmm", {a, b}, [a, b, batch, m, n, k, transpose_b](Graph& g, const Tensor& go) {
    const float* A = g.value(a).ptr();
    const float* B = g.value(b).ptr();
    if (g.requires_grad(a)) {
      float* dA = g.grad(a).mutable_ptr();
      // dA = dC * op(B)^T
      for (int64_t i = 0; i < batch; ++i) {
        gemm(false, !transpose_b, m, k, n, 1.0f, go.ptr() + i * m * n, n, B + i * k * n, transpose_b ? k : n, 1.0f,
             dA + i * m * k, k);
      }
    }
    if (g.requires_grad(b)) {
      float* dB = g.grad(b).mutable_ptr();
      for (int64_t i = 0; i < batch; ++i) {
        if (transpose_b) {  // dB[n,k] = dC^T A
          gemm(true, false, n, k, m, 1.0f, go.ptr() + i * m * n, n, A + i * m * k, k, 1.0f, dB + i * k * n, k);
        } else {  // dB[k,n] = A^T dC
          gemm(true, false, k, n, m, 1.0f, A + i * m * k, k, go.ptr() + i * m * n, n, 1.0f, dB + i * k * n, n);
        }
      }
    }
  });
}

Var Graph::add(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const bool same = A.shape() == B.shape();
  bool suffix = !same && B.rank() <= A.rank() && B.numel() > 0;
  if (suffix) {
    for (int64_t i = 1; i <= B.rank(); ++i) suffix = suffix && A.dim(-i) == B.dim(-i);
  }
  if (!same && !suffix) throw ShapeError("add", A.shape(), B.shape());
  Tensor out = A;
  const int64_t inner = B.numel();
  const int64_t outer = out.numel() / inner;
  float* o = out.mutable_ptr();
  const float* bp = B.ptr();
  for (int64_t r = 0; r < outer; ++r)
    for (int64_t j = 0; j < inner; ++j) o[r * inner + j] += bp[j];
  return push(std::move(out), "add", {a, b}, [a, b, inner, outer](Graph& g, const Tensor& go) {
    if (g.requires_grad(a)) add_into(g.grad(a), go);
    if (g.requires_grad(b)) {
      float* d = g.grad(b).mutable_ptr();
      const float* gp = go.ptr();
      for (int64_t r = 0; r < outer; ++r)
        for (int64_t j = 0; j < inner; ++j) d[j] += gp[r * inner + j];
    }
  });
}

Var Graph::sub(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape() != B.shape()) throw ShapeError("sub", A.shape(), B.shape());
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
  return push(std::move(out), "sub", {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (g.requires_grad(a)) add_into(g.grad(a), go);
    if (g.requires_grad(b)) {
      Tensor& d = g.grad(b);
      for (int64_t i = 0; i < go.numel(); ++i) d[i] -= go[i];
    }
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape() != B.shape()) throw ShapeError("mul", A.shape(), B.shape());
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  return push(std::move(out), "mul", {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (g.requires_grad(a)) {
      Tensor& d = g.grad(a);
      const Tensor& B = g.value(b);
      for (int64_t i = 0; i < go.numel(); ++i) d[i] += go[i] * B[i];
    }
    if (g.requires_grad(b)) {
      Tensor& d = g.grad(b);
      const Tensor& A = g.value(a);
      for (int64_t i = 0; i < go.numel(); ++i) d[i] += go[i] * A[i];
    }
  });
}

Var Graph::scale(Var a, float s) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return push(std::move(out), "scale", {a}, [a, s](Graph& g, const Tensor& go) {
    Tensor& d = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) d[i] += go[i] * s;
  });
}

Var Graph::softmax(Var a, bool causal) {
  const Tensor& X = value(a);
  if (X.rank() < 1) throw ShapeError("softmax: needs rank >= 1, got " + shape_str(X.shape()));
  const int64_t cols = X.dim(-1);
  const int64_t rows = rows_of(X);
  if (causal && (X.rank() < 2 || X.dim(-2) != cols)) throw ShapeError("causal softmax: last axes must be square, got " + shape_str(X.shape()));
  Tensor out(X.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = X.ptr() + r * cols;
    float* y = out.mutable_ptr() + r * cols;
    const int64_t span = causal ? (r % cols) + 1 : cols;
    float mx = x[0];
    for (int64_t j = 1; j < span; ++j) mx = std::max(mx, x[j]);
    double total = 0.0;
    for (int64_t j = 0; j < span; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (int64_t j = 0; j < span; ++j) y[j] *= inv;
  }
  const Var self{static_cast<int32_t>(nodes_.size())};
  return push(std::move(out), "softmax", {a}, [a, self, rows, cols, causal](Graph& g, const Tensor& go) {
    const Tensor& Y = g.value(self);
    Tensor& d = g.grad(a);
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = Y.ptr() + r * cols;
      const float* dy = go.ptr() + r * cols;
      float* dx = d.mutable_ptr() + r * cols;
      const int64_t span = causal ? (r % cols) + 1 : cols;
      double dot = 0.0;
      for (int64_t j = 0; j < span; ++j) dot += static_cast<double>(y[j]) * dy[j];
      const float fdot = static_cast<float>(dot);
      for (int64_t j = 0; j < span; ++j) dx[j] += y[j] * (dy[j] - fdot);
    }
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, float eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  const int64_t d = X.rank() ? X.dim(-1) : 1;
  if (G.shape() != Shape{d} || B.shape() != Shape{d}) throw ShapeError("layer_norm", X.shape(), G.shape());
  const int64_t rows = rows_of(X);
  Tensor out(X.shape());
  // Saved per-row statistics: xhat and 1/std.
  Tensor xhat(X.shape());
  std::vector<float> rstd(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = X.ptr() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = static_cast<float>(rs);
    float* xh = xhat.mutable_ptr() + r * d;
    float* y = out.mutable_ptr() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      xh[j] = static_cast<float>((xr[j] - mu) * rs);
      y[j] = xh[j] * G[j] + B[j];
    }
  }
  return push(std::move(out), "layer_norm", {x, gamma, beta},
              [x, gamma, beta, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, const Tensor& go) {
                const Tensor& G = g.value(gamma);
                if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                  std::vector<double> dg(static_cast<size_t>(d), 0.0), db(static_cast<size_t>(d), 0.0);
                  for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t j = 0; j < d; ++j) {
                      dg[j] += static_cast<double>(go[r * d + j]) * xhat[r * d + j];
                      db[j] += go[r * d + j];
                    }
                  }
                  if (g.requires_grad(gamma)) {
                    Tensor& t = g.grad(gamma);
                    for (int64_t j = 0; j < d; ++j) t[j] += static_cast<float>(dg[j]);
                  }
                  if (g.requires_grad(beta)) {
                    Tensor& t = g.grad(beta);
                    for (int64_t j = 0; j < d; ++j) t[j] += static_cast<float>(db[j]);
                  }
                }
                if (g.requires_grad(x)) {
                  Tensor& dx = g.grad(x);
                  for (int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                      const double dxh = static_cast<double>(go[r * d + j]) * G[j];
                      m1 += dxh;
                      m2 += dxh * xhat[r * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    const double rs = rstd[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < d; ++j) {
                      const double dxh = static_cast<double>(go[r * d + j]) * G[j];
                      dx[r * d + j] += static_cast<float>(rs * (dxh - m1 - xhat[r * d + j] * m2));
                    }
                  }
                }
              });
}

Var Graph::relu(Var a) {
  Tensor out = value(a);
  float* o = out.mutable_ptr();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] = o[i] > 0.0f ? o[i] : 0.0f;
  return push(std::move(out), "relu", {a}, [a](Graph& g, const Tensor& go) {
    const Tensor& X = g.value(a);
    Tensor& d = g.grad(a);
    const float* x = X.ptr();
    const float* gp = go.ptr();
    float* dp = d.mutable_ptr();
    for (int64_t i = 0; i < go.numel(); ++i) dp[i] += x[i] > 0.0f ? gp[i] : 0.0f;
  });
}

Var Graph::gelu(Var a) {
  // 0.5 * (1 + tanh(u)) == sigmoid(2u); the sigmoid form avoids cancellation in the negative tail.
  auto sig = [](float x) {
    const float u = kGeluC * (x + 0.044715f * x * x * x);
    return 1.0f / (1.0f + std::exp(-2.0f * u));
  };
  const Tensor& X = value(a);
  Tensor out(X.shape());
  for (int64_t i = 0; i < X.numel(); ++i) out[i] = X[i] * sig(X[i]);
  return push(std::move(out), "gelu", {a}, [a, sig](Graph& g, const Tensor& go) {
    const Tensor& X = g.value(a);
    Tensor& d = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) {
      const float x = X[i];
      const float s = sig(x);
      const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
      d[i] += go[i] * (s + x * 2.0f * s * (1.0f - s) * du);
    }
  });
}

Var Graph::tanh(Var a) {
  Tensor out = value(a);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  const Var self{static_cast<int32_t>(nodes_.size())};
  return push(std::move(out), "tanh", {a}, [a, self](Graph& g, const Tensor& go) {
    const Tensor& Y = g.value(self);
    Tensor& d = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) d[i] += go[i] * (1.0f - Y[i] * Y[i]);
  });
}

Var Graph::dropout(Var a, float rate) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw Error("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  const uint64_t call = dropout_calls_++;
  if (!options_.training || rate == 0.0f) return a;
  // Counter-based stream: (seed, op id, step) fixes the mask independent of call history elsewhere.
  const uint64_t base = mix64(options_.dropout_seed ^ mix64(call ^ mix64(options_.step)));
  Tensor out = value(a);
  const float keep_scale = 1.0f / (1.0f - rate);
  std::vector<float> mask(static_cast<size_t>(out.numel()));
  for (int64_t i = 0; i < out.numel(); ++i) {
    const bool keep = bits_to_unit(mix64(base + static_cast<uint64_t>(i))) >= rate;
    mask[static_cast<size_t>(i)] = keep ? keep_scale : 0.0f;
    out[i] *= mask[static_cast<size_t>(i)];
  }
  return push(std::move(out), "dropout", {a}, [a, mask = std::move(mask)](Graph& g, const Tensor& go) {
    Tensor& d = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) d[i] += go[i] * mask[static_cast<size_t>(i)];
  });
}

Var Graph::embedding(Var table, std::span<const int32_t> ids, Shape out_prefix) {
  const Tensor& T = value(table);
  if (T.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(T.shape()));
  if (shape_numel(out_prefix) != static_cast<int64_t>(ids.size()))
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill " + shape_str(out_prefix));
  const int64_t vocab = T.dim(0), d = T.dim(1);
  Shape shape = out_prefix;
  shape.push_back(d);
  Tensor out(shape);
  std::vector<int32_t> saved(ids.begin(), ids.end());
  for (size_t i = 0; i < saved.size(); ++i) {
    if (saved[i] < 0 || saved[i] >= vocab)
      throw Error("embedding: id " + std::to_string(saved[i]) + " outside table of " + std::to_string(vocab));
    std::copy_n(T.ptr() + saved[i] * d, d, out.mutable_ptr() + static_cast<int64_t>(i) * d);
  }
  return push(std::move(out), "embedding", {table}, [table, d, saved = std::move(saved)](Graph& g, const Tensor& go) {
    Tensor& dt = g.grad(table);
    for (size_t i = 0; i < saved.size(); ++i) {
      float* row = dt.mutable_ptr() + saved[i] * d;
      const float* src = go.ptr() + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) row[j] += src[j];
    }
  });
}

Var Graph::mse_loss(Var pred, Var target, std::span<const float> row_mask) {
  const Tensor& P = value(pred);
  const Tensor& Y = value(target);
  if (P.shape() != Y.shape()) throw ShapeError("mse_loss", P.shape(), Y.shape());
  const int64_t rows = rows_of(P);
  const int64_t cols = P.rank() ? P.dim(-1) : 1;
  std::vector<float> mask(row_mask.begin(), row_mask.end());
  if (mask.empty()) mask.assign(static_cast<size_t>(rows), 1.0f);
  if (static_cast<int64_t>(mask.size()) != rows)
    throw ShapeError("mse_loss: mask has " + std::to_string(mask.size()) + " rows, prediction has " + std::to_string(rows));
  double weight = 0.0;
  for (float m : mask) weight += m;
  if (weight <= 0.0) throw Error("mse_loss: no supervised positions (fully masked batch)");
  const double denom = weight * static_cast<double>(cols);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (mask[static_cast<size_t>(r)] == 0.0f) continue;
    for (int64_t j = 0; j < cols; ++j) {
      const double e = static_cast<double>(P[r * cols + j]) - Y[r * cols + j];
      total += mask[static_cast<size_t>(r)] * e * e;
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / denom));
  return push(std::move(out), "mse_loss", {pred, target},
              [pred, target, rows, cols, denom, mask = std::move(mask)](Graph& g, const Tensor& go) {
                const Tensor& P = g.value(pred);
                const Tensor& Y = g.value(target);
                const double s = 2.0 * go[0] / denom;
                for (int pass = 0; pass < 2; ++pass) {
                  const Var v = pass == 0 ? pred : target;
                  if (!g.requires_grad(v)) continue;
                  const double sign = pass == 0 ? 1.0 : -1.0;
                  Tensor& d = g.grad(v);
                  for (int64_t r = 0; r < rows; ++r) {
                    const float m = mask[static_cast<size_t>(r)];
                    if (m == 0.0f) continue;
                    for (int64_t j = 0; j < cols; ++j) {
                      const int64_t i = r * cols + j;
                      d[i] += static_cast<float>(sign * s * m * (static_cast<double>(P[i]) - Y[i]));
                    }
                  }
                }
              });
}

Var Graph::cross_entropy(Var logits, std::span<const int32_t> targets) {
  const Tensor& L = value(logits);
  const int64_t vocab = L.rank() ? L.dim(-1) : 1;
  const int64_t rows = rows_of(L);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  if (rows == 0) throw Error("cross_entropy: empty batch");
  Tensor probs(L.shape());
  double total = 0.0;
  std::vector<int32_t> saved(targets.begin(), targets.end());
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t t = saved[static_cast<size_t>(r)];
    if (t < 0 || t >= vocab) throw Error("cross_entropy: target id " + std::to_string(t) + " outside vocabulary");
    const float* x = L.ptr() + r * vocab;
    float* p = probs.mutable_ptr() + r * vocab;
    float mx = x[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(x[j] - mx));
    for (int64_t j = 0; j < vocab; ++j) p[j] = static_cast<float>(std::exp(static_cast<double>(x[j] - mx)) / z);
    total += std::log(z) - static_cast<double>(x[t] - mx);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  return push(std::move(out), "cross_entropy", {logits},
              [logits, rows, vocab, probs = std::move(probs), saved = std::move(saved)](Graph& g, const Tensor& go) {
                Tensor& d = g.grad(logits);
                const float s = go[0] / static_cast<float>(rows);
                for (int64_t r = 0; r < rows; ++r) {
                  for (int64_t j = 0; j < vocab; ++j) {
                    const float onehot = j == saved[static_cast<size_t>(r)] ? 1.0f : 0.0f;
                    d[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                  }
                }
              });
}

Var Graph::sum(Var a) {
  const Tensor& X = value(a);
  double total = 0.0;
  for (float v : X.data()) total += v;
  return push(Tensor::scalar(static_cast<float>(total)), "sum", {a}, [a](Graph& g, const Tensor& go) {
    Tensor& d = g.grad(a);
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += go[0];
  });
}

Var Graph::mean(Var a) {
  const int64_t n = value(a).numel();
  if (n == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(n));
}

Var Graph::reshape(Var a, Shape shape) {
  Tensor out = value(a).reshaped(std::move(shape));
  return push(std::move(out), "reshape", {a}, [a](Graph& g, const Tensor& go) { add_into(g.grad(a), go); });
}

Var Graph::split_heads(Var x, int64_t batch, int64_t seq, int64_t heads) {
  const Tensor& X = value(x);
  if (X.rank() != 2 || X.dim(0) != batch * seq || heads <= 0 || X.dim(1) % heads != 0)
    throw ShapeError("split_heads: cannot split " + shape_str(X.shape()) + " into B=" + std::to_string(batch) +
                     " T=" + std::to_string(seq) + " H=" + std::to_string(heads));
  const int64_t hd = X.dim(1) / heads, width = X.dim(1);
  Tensor out({batch * heads, seq, hd});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < seq; ++t)
        std::copy_n(X.ptr() + (b * seq + t) * width + h * hd, hd, out.mutable_ptr() + ((b * heads + h) * seq + t) * hd);
  return push(std::move(out), "split_heads", {x}, [x, batch, seq, heads, hd, width](Graph& g, const Tensor& go) {
    Tensor& d = g.grad(x);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < seq; ++t) {
          float* dst = d.mutable_ptr() + (b * seq + t) * width + h * hd;
          const float* src = go.ptr() + ((b * heads + h) * seq + t) * hd;
          for (int64_t e = 0; e < hd; ++e) dst[e] += src[e];
        }
  });
}

Var Graph::merge_heads(Var x, int64_t batch, int64_t seq, int64_t heads) {
  const Tensor& X = value(x);
  if (X.rank() != 3 || X.dim(0) != batch * heads || X.dim(1) != seq)
    throw ShapeError("merge_heads: unexpected input " + shape_str(X.shape()));
  const int64_t hd = X.dim(2), width = hd * heads;
  Tensor out({batch * seq, width});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < seq; ++t)
        std::copy_n(X.ptr() + ((b * heads + h) * seq + t) * hd, hd, out.mutable_ptr() + (b * seq + t) * width + h * hd);
  return push(std::move(out), "merge_heads", {x}, [x, batch, seq, heads, hd, width](Graph& g, const Tensor& go) {
    Tensor& d = g.grad(x);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < seq; ++t) {
          float* dst = d.mutable_ptr() + ((b * heads + h) * seq + t) * hd;
          const float* src = go.ptr() + (b * seq + t) * width + h * hd;
          for (int64_t e = 0; e < hd; ++e) dst[e] += src[e];
        }
  });
}

Var Graph::interleave(std::span<const Var> parts) {
  if (parts.empty()) throw Error("interleave: no inputs");
  const Shape& s0 = shape(parts[0]);
  if (s0.size() != 3) throw ShapeError("interleave: parts must be [B,T,D], got " + shape_str(s0));
  for (Var p : parts)
    if (shape(p) != s0) throw ShapeError("interleave", s0, shape(p));
  const int64_t batch = s0[0], seq = s0[1], d = s0[2];
  const int64_t n = static_cast<int64_t>(parts.size());
  Tensor out({batch, seq * n, d});
  for (int64_t p = 0; p < n; ++p) {
    const Tensor& X = value(parts[static_cast<size_t>(p)]);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t t = 0; t < seq; ++t)
        std::copy_n(X.ptr() + (b * seq + t) * d, d, out.mutable_ptr() + ((b * seq + t) * n + p) * d);
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  Var out_var = push(std::move(out), "interleave", {}, nullptr);
  // Inputs are variadic, so wire requires_grad and the closure by hand.
  Node& node_ref = node(out_var);
  for (Var p : saved) node_ref.requires_grad = node_ref.requires_grad || node(p).requires_grad;
  if (node_ref.requires_grad) {
    node_ref.backward = [saved, batch, seq, d, n](Graph& g, const Tensor& go) {
      for (int64_t p = 0; p < n; ++p) {
        const Var v = saved[static_cast<size_t>(p)];
        if (!g.requires_grad(v)) continue;
        Tensor& dx = g.grad(v);
        for (int64_t b = 0; b < batch; ++b)
          for (int64_t t = 0; t < seq; ++t) {
            float* dst = dx.mutable_ptr() + (b * seq + t) * d;
            const float* src = go.ptr() + ((b * seq + t) * n + p) * d;
            for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
          }
      }
    };
  }
  return out_var;
}

Var Graph::take_strided(Var x, int64_t start, int64_t stride) {
  const Tensor& X = value(x);
  if (X.rank() != 3 || stride <= 0 || start < 0 || start >= X.dim(1))
    throw ShapeError("take_strided: bad input " + shape_str(X.shape()) + " start=" + std::to_string(start) +
                     " stride=" + std::to_string(stride));
  const int64_t batch = X.dim(0), len = X.dim(1), d = X.dim(2);
  const int64_t count = (len - start + stride - 1) / stride;
  Tensor out({batch, count, d});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < count; ++i)
      std::copy_n(X.ptr() + (b * len + start + i * stride) * d, d, out.mutable_ptr() + (b * count + i) * d);
  return push(std::move(out), "take_strided", {x}, [x, batch, len, d, count, start, stride](Graph& g, const Tensor& go) {
    Tensor& dx = g.grad(x);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t i = 0; i < count; ++i) {
        float* dst = dx.mutable_ptr() + (b * len + start + i * stride) * d;
        const float* src = go.ptr() + (b * count + i) * d;
        for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
      }
  });
}

Var Graph::max_cosine_distance(Var embeddings, const Tensor& centers) {
  const Tensor& E = value(embeddings);
  if (centers.rank() != 2 || E.rank() < 1 || E.dim(-1) != centers.dim(1) || centers.dim(0) == 0)
    throw ShapeError("max_cosine_distance", E.shape(), centers.shape());
  const int64_t rows = rows_of(E), d = E.dim(-1), k = centers.dim(0);
  if (rows == 0) throw Error("max_cosine_distance: no embeddings");
  std::vector<double> cnorm2(static_cast<size_t>(k));
  for (int64_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += static_cast<double>(centers[c * d + j]) * centers[c * d + j];
    cnorm2[static_cast<size_t>(c)] = s;
  }
  std::vector<int64_t> best(static_cast<size_t>(rows), -1);
  std::vector<double> best_cos(static_cast<size_t>(rows), 0.0);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const float* e = E.ptr() + r * d;
    double en2 = 0.0;
    for (int64_t j = 0; j < d; ++j) en2 += static_cast<double>(e[j]) * e[j];
    double bc = -2.0;
    for (int64_t c = 0; c < k; ++c) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += static_cast<double>(e[j]) * centers[c * d + j];
      const double denom = std::sqrt(en2 * cnorm2[static_cast<size_t>(c)]);
      const double cs = denom > 0.0 ? std::min(1.0, std::max(-1.0, dot / denom)) : 0.0;
      if (cs > bc) {
        bc = cs;
        best[static_cast<size_t>(r)] = denom > 0.0 ? c : -1;
      }
    }
    best_cos[static_cast<size_t>(r)] = bc;
    total += 1.0 - bc;
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  return push(std::move(out), "max_cosine_distance", {embeddings},
              [embeddings, centers, rows, d, cnorm2 = std::move(cnorm2), best = std::move(best),
               best_cos = std::move(best_cos)](Graph& g, const Tensor& go) {
                const Tensor& E = g.value(embeddings);
                Tensor& dE = g.grad(embeddings);
                const double s = -static_cast<double>(go[0]) / static_cast<double>(rows);
                for (int64_t r = 0; r < rows; ++r) {
                  const int64_t c = best[static_cast<size_t>(r)];
                  if (c < 0) continue;
                  const float* e = E.ptr() + r * d;
                  double en2 = 0.0;
                  for (int64_t j = 0; j < d; ++j) en2 += static_cast<double>(e[j]) * e[j];
                  const double en = std::sqrt(en2), cn = std::sqrt(cnorm2[static_cast<size_t>(c)]);
                  const double cs = best_cos[static_cast<size_t>(r)];
                  // d cos / d e = c / (|e||c|) - cos * e / |e|^2
                  for (int64_t j = 0; j < d; ++j) {
                    const double grad = centers[c * d + j] / (en * cn) - cs * e[j] / en2;
                    dE[r * d + j] += static_cast<float>(s * grad);
                  }
                }
              });
}

GradientMap Graph::backward(Var loss) {
  if (consumed_) throw Error("backward: graph already consumed");
  const Tensor& L = value(loss);
  if (L.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(L.shape()));
  consumed_ = true;
  if (node(loss).requires_grad) {
    grad(loss)[0] = 1.0f;
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || !n.backward || n.grad.numel() == 0) continue;
      // Move the closure out so it may resize nodes' grads freely.
      auto fn = std::move(n.backward);
      Tensor go = std::move(n.grad);
      fn(*this, go);
      n.grad = std::move(go);
    }
  }
  GradientMap out;
  for (Node& n : nodes_) {
    if (!n.trainable_param) continue;
    Tensor g = n.grad.numel() == n.value.numel() && n.grad.shape() == n.value.shape() ? std::move(n.grad)
                                                                                       : Tensor(n.value.shape());
    auto [it, inserted] = out.emplace(n.name, std::move(g));
    if (!inserted) throw Error("backward: parameter '" + n.name + "' registered twice");
  }
  return out;
}

}  // namespace dtm::ad
