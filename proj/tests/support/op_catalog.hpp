#pragma once

// Random small instances of every differentiable op, for finite-difference checks.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct OpCase {
  std::vector<Tensor> inputs;
  OpBuilder build;
  dtm::ad::GraphOptions options;
};

struct OpSpec {
  std::string name;
  std::function<OpCase(uint64_t seed)> make;
};

// Keeps values at least `margin` away from zero so kinks stay outside the FD stencil.
inline Tensor away_from_zero(Tensor t, float margin = 0.05f) {
  for (float& v : t.mutable_data())
    if (std::fabs(v) < margin) v = v < 0.0f ? -margin - std::fabs(v) : margin + std::fabs(v);
  return t;
}

inline std::vector<OpSpec> op_catalog() {
  using dtm::Rng;
  std::vector<OpSpec> ops;
  auto dims = [](Rng& r, int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(r.below(static_cast<uint64_t>(hi - lo + 1))); };

  ops.push_back({"matmul", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t b = dims(r, 1, 3), m = dims(r, 1, 4), k = dims(r, 1, 5), n = dims(r, 1, 4);
                   return OpCase{{random_tensor({b, m, k}, r), random_tensor({k, n}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.matmul(v[0], v[1]); }};
                 }});
  ops.push_back({"bmm", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t b = dims(r, 1, 3), m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
                   return OpCase{{random_tensor({b, m, k}, r), random_tensor({b, k, n}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.bmm(v[0], v[1]); }};
                 }});
  ops.push_back({"bmm_transposed", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t b = dims(r, 1, 3), m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
                   return OpCase{{random_tensor({b, m, k}, r), random_tensor({b, n, k}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.bmm(v[0], v[1], true); }};
                 }});
  ops.push_back({"add_broadcast", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t a = dims(r, 1, 3), b = dims(r, 1, 3), c = dims(r, 1, 4);
                   return OpCase{{random_tensor({a, b, c}, r), random_tensor({c}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.add(v[0], v[1]); }};
                 }});
  ops.push_back({"sub_mul", [=](uint64_t s) {
                   Rng r(s);
                   const Shape sh{dims(r, 1, 3), dims(r, 1, 4)};
                   return OpCase{{random_tensor(sh, r), random_tensor(sh, r), random_tensor(sh, r)},
                                 [](Graph& g, const std::vector<Var>& v) {
                                   return g.scale(g.mul(g.sub(v[0], v[1]), v[2]), 0.7f);
                                 }};
                 }});
  ops.push_back({"softmax", [=](uint64_t s) {
                   Rng r(s);
                   return OpCase{{random_tensor({dims(r, 1, 3), dims(r, 2, 5)}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.softmax(v[0]); }};
                 }});
  ops.push_back({"softmax_causal", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t t = dims(r, 1, 5);
                   return OpCase{{random_tensor({dims(r, 1, 3), t, t}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.softmax(v[0], true); }};
                 }});
  ops.push_back({"layer_norm", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t d = dims(r, 3, 6);
                   return OpCase{{random_tensor({dims(r, 1, 4), d}, r), random_tensor({d}, r), random_tensor({d}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.layer_norm(v[0], v[1], v[2]); }};
                 }});
  ops.push_back({"relu", [=](uint64_t s) {
                   Rng r(s);
                   return OpCase{{away_from_zero(random_tensor({dims(r, 1, 4), dims(r, 1, 5)}, r))},
                                 [](Graph& g, const std::vector<Var>& v) { return g.relu(v[0]); }};
                 }});
  ops.push_back({"gelu", [=](uint64_t s) {
                   Rng r(s);
                   return OpCase{{random_tensor({dims(r, 1, 4), dims(r, 1, 5)}, r, 1.5)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.gelu(v[0]); }};
                 }});
  ops.push_back({"tanh", [=](uint64_t s) {
                   Rng r(s);
                   return OpCase{{random_tensor({dims(r, 1, 4), dims(r, 1, 5)}, r)},
                                 [](Graph& g, const std::vector<Var>& v) { return g.tanh(v[0]); }};
                 }});
  ops.push_back({"dropout_train", [=](uint64_t s) {
                   Rng r(s);
                   OpCase c{{random_tensor({dims(r, 2, 4), dims(r, 2, 6)}, r)},
                            [](Graph& g, const std::vector<Var>& v) { return g.dropout(v[0], 0.3f); }};
                   c.options = {.training = true, .dropout_seed = s, .step = 3};
                   return c;
                 }});
  ops.push_back({"embedding", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t vocab = dims(r, 2, 6), n = dims(r, 1, 6);
                   std::vector<int32_t> ids;
                   for (int64_t i = 0; i < n; ++i) ids.push_back(static_cast<int32_t>(r.below(static_cast<uint64_t>(vocab))));
                   return OpCase{{random_tensor({vocab, dims(r, 1, 4)}, r)},
                                 [ids, n](Graph& g, const std::vector<Var>& v) { return g.embedding(v[0], ids, {n}); }};
                 }});
  ops.push_back({"mse_loss_masked", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t rows = dims(r, 2, 5), cols = dims(r, 1, 3);
                   std::vector<float> mask(static_cast<size_t>(rows), 1.0f);
                   mask[static_cast<size_t>(rows - 1)] = 0.0f;
                   return OpCase{{random_tensor({rows, cols}, r), random_tensor({rows, cols}, r)},
                                 [mask](Graph& g, const std::vector<Var>& v) { return g.mse_loss(v[0], v[1], mask); }};
                 }});
  ops.push_back({"cross_entropy", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t rows = dims(r, 1, 4), vocab = dims(r, 2, 6);
                   std::vector<int32_t> targets;
                   for (int64_t i = 0; i < rows; ++i) targets.push_back(static_cast<int32_t>(r.below(static_cast<uint64_t>(vocab))));
                   return OpCase{{random_tensor({rows, vocab}, r)},
                                 [targets](Graph& g, const std::vector<Var>& v) { return g.cross_entropy(v[0], targets); }};
                 }});
  ops.push_back({"sum_mean_reshape", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t a = dims(r, 1, 3), b = dims(r, 1, 4);
                   return OpCase{{random_tensor({a, b}, r), random_tensor({a * b}, r)},
                                 [a, b](Graph& g, const std::vector<Var>& v) {
                                   Var x = g.mul(g.reshape(v[0], {a * b}), v[1]);
                                   return g.add(g.sum(x), g.mean(g.mul(x, x)));
                                 }};
                 }});
  ops.push_back({"split_merge_heads", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t b = dims(r, 1, 2), t = dims(r, 1, 3), h = dims(r, 1, 3), hd = dims(r, 1, 2);
                   return OpCase{{random_tensor({b * t, h * hd}, r), random_tensor({b * h, t, hd}, r)},
                                 [b, t, h](Graph& g, const std::vector<Var>& v) {
                                   Var x = g.mul(g.split_heads(v[0], b, t, h), v[1]);
                                   return g.merge_heads(x, b, t, h);
                                 }};
                 }});
  ops.push_back({"interleave_take_strided", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t b = dims(r, 1, 2), t = dims(r, 1, 3), d = dims(r, 1, 3);
                   return OpCase{{random_tensor({b, t, d}, r), random_tensor({b, t, d}, r), random_tensor({b, t, d}, r)},
                                 [](Graph& g, const std::vector<Var>& v) {
                                   const std::array<Var, 3> parts{v[0], v[1], v[2]};
                                   Var x = g.interleave(parts);
                                   return g.add(g.take_strided(x, 1, 3), g.take_strided(g.mul(x, x), 2, 3));
                                 }};
                 }});
  ops.push_back({"max_cosine_distance", [=](uint64_t s) {
                   Rng r(s);
                   const int64_t d = dims(r, 2, 4);
                   const Tensor centers = random_tensor({dims(r, 1, 4), d}, r);
                   // Redraw points until the best center wins clearly, so the max stays put under FD steps.
                   auto separated = [&](const Tensor& x) {
                     const int64_t k = centers.dim(0);
                     for (int64_t i = 0; i < x.dim(0); ++i) {
                       double best = -2.0, second = -2.0, xn = 0.0;
                       for (int64_t j = 0; j < d; ++j) xn += double(x[i * d + j]) * x[i * d + j];
                       if (xn < 0.09) return false;
                       for (int64_t c = 0; c < k; ++c) {
                         double dot = 0.0, cn = 0.0;
                         for (int64_t j = 0; j < d; ++j) {
                           dot += double(x[i * d + j]) * centers[c * d + j];
                           cn += double(centers[c * d + j]) * centers[c * d + j];
                         }
                         const double cos = dot / std::sqrt(xn * cn);
                         if (cos > best) {
                           second = best;
                           best = cos;
                         } else if (cos > second) {
                           second = cos;
                         }
                       }
                       if (best - second < 0.05) return false;
                     }
                     return true;
                   };
                   Tensor x = random_tensor({dims(r, 1, 5), d}, r);
                   while (!separated(x)) x = random_tensor(x.shape(), r);
                   return OpCase{{x},
                                 [centers](Graph& g, const std::vector<Var>& v) {
                                   return g.max_cosine_distance(v[0], centers);
                                 }};
                 }});
  return ops;
}

}  // namespace oracle
