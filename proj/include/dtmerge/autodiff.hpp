#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dtmerge/tensor.hpp"

namespace dtm::ad {

// Handle to a value recorded on a Graph.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

struct GraphOptions {
  bool training = false;  // dropout is the identity when false
  uint64_t dropout_seed = 0;
  uint64_t step = 0;
};

using GradientMap = std::map<std::string, Tensor>;

// Tape-based reverse-mode autodiff. Nodes are appended in evaluation order, so the
// tape is a topological order and backward is a single reverse sweep.
//
// Shapes use row-major "rows x features" conventions: matmul contracts the last axis
// of its left operand with the first axis of a 2-D weight.
class Graph {
 public:
  explicit Graph(GraphOptions options = {});

  Var input(Tensor value);
  Var parameter(const std::string& name, Tensor value, bool trainable = true);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const;

  // [..., K] x [K, N] -> [..., N]
  Var matmul(Var a, Var w);
  // [B, M, K] x [B, K, N] -> [B, M, N]; with transpose_b the right operand is [B, N, K].
  Var bmm(Var a, Var b, bool transpose_b = false);
  // Same shapes, or b matching a trailing suffix of a's shape (broadcast over leading axes).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, float s);
  // Softmax over the last axis. With causal=true the last two axes must be square and
  // row i only spans columns 0..i; masked entries are exactly zero.
  Var softmax(Var a, bool causal = false);
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
  Var relu(Var a);
  Var gelu(Var a);
  Var tanh(Var a);
  Var dropout(Var a, float rate);
  // Rows of table [V, D] gathered by ids; result shape is out_prefix + [D].
  Var embedding(Var table, std::span<const int32_t> ids, Shape out_prefix);
  // Mean squared error over rows (all axes but the last). row_mask, when given, has one
  // entry per row; rows with weight 0 are excluded.
  Var mse_loss(Var pred, Var target, std::span<const float> row_mask = {});
  // Mean next-token cross entropy; logits [..., V], one target id per row.
  Var cross_entropy(Var logits, std::span<const int32_t> targets);
  Var sum(Var a);
  Var mean(Var a);
  Var reshape(Var a, Shape shape);
  // [B*T, H*hd] -> [B*H, T, hd] and back.
  Var split_heads(Var x, int64_t batch, int64_t seq, int64_t heads);
  Var merge_heads(Var x, int64_t batch, int64_t seq, int64_t heads);
  // parts[p] is [B, T, D]; output [B, T*n, D] ordered (p0_t, p1_t, ..., p0_{t+1}, ...).
  Var interleave(std::span<const Var> parts);
  // [B, L, D] -> rows start, start+stride, ... along L.
  Var take_strided(Var x, int64_t start, int64_t stride);
  // mean over rows of (1 - max_j cos(row, centers[j])); centers are constants.
  Var max_cosine_distance(Var embeddings, const Tensor& centers);

  // Gradients for every trainable parameter; non-contributing ones are zero.
  // The tape is consumed: a second call throws.
  GradientMap backward(Var loss);
  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool trainable_param = false;
    std::string name;
    std::function<void(Graph&, const Tensor& grad_out)> backward;
  };

  Var push(Tensor value, std::string_view op, std::initializer_list<Var> inputs,
           std::function<void(Graph&, const Tensor&)> backward);
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor& grad(Var v);

  GraphOptions options_;
  std::vector<Node> nodes_;
  uint64_t dropout_calls_ = 0;
  bool consumed_ = false;
};

// C = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha, const float* a, int64_t lda,
          const float* b, int64_t ldb, float beta, float* c, int64_t ldc);

}  // namespace dtm::ad
