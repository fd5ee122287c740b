#include <gtest/gtest.h>

#include <cmath>

#include "dtmerge/mff.hpp"
#include "dtmerge/transformer.hpp"
#include "support/oracles.hpp"

using dtm::ArchConfig;
using dtm::LayerSelector;
using dtm::Tensor;
using dtm::ad::Graph;
using dtm::ad::Var;

namespace {

ArchConfig small_arch(int64_t heads = 2, dtm::Activation act = dtm::Activation::relu) {
  ArchConfig a;
  a.n_layers = 3;
  a.n_heads = heads;
  a.d_embed = 8;
  a.context_positions = 6;
  a.activation = act;
  a.dropout = 0.0f;
  return a;
}

Tensor run_forward(const dtm::ParameterTree& tree, const ArchConfig& arch, const Tensor& x, int64_t batch, int64_t seq,
                   std::vector<Tensor>* probs = nullptr) {
  Graph g;
  const auto p = dtm::bind_parameters(g, tree);
  std::vector<Var> pv;
  Tensor out = g.value(dtm::transformer_forward(g, p, arch, g.input(x), batch, seq, probs ? &pv : nullptr));
  if (probs)
    for (Var v : pv) probs->push_back(g.value(v));
  return out;
}

}  // namespace

TEST(Transformer, AttentionMatchesTripleLoopOracle) {
  for (int64_t heads : {1, 2, 4}) {
    const ArchConfig arch = small_arch(heads);
    const auto tree = oracle::jitter(dtm::init_transformer(arch, 11), 12);
    dtm::Rng rng(13);
    const int64_t seq = 6;
    const Tensor x = oracle::random_tensor({seq, 8}, rng);
    Graph g;
    const auto p = dtm::bind_parameters(g, tree);
    std::vector<Var> probs;
    const Tensor y = g.value(dtm::attention_forward(g, p, arch, 1, g.input(x), 1, seq, &probs));
    oracle::Mat xm;
    for (int64_t r = 0; r < seq; ++r) xm.push_back(oracle::row_of(x, r));
    std::vector<oracle::Mat> ref_probs;
    const oracle::Mat ref = oracle::attention_ref(xm, tree, "block1.attn.", heads, &ref_probs);
    for (int64_t r = 0; r < seq; ++r)
      for (int64_t c = 0; c < 8; ++c) EXPECT_NEAR(y[r * 8 + c], ref[size_t(r)][size_t(c)], 1e-5);
    ASSERT_EQ(probs.size(), 1u);
    const Tensor& pt = g.value(probs[0]);
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < seq; ++i)
        for (int64_t j = 0; j < seq; ++j)
          EXPECT_NEAR(pt[(h * seq + i) * seq + j], ref_probs[size_t(h)][size_t(i)][size_t(j)], 1e-6);
  }
}

TEST(Transformer, FullForwardMatchesReference) {
  for (auto act : {dtm::Activation::relu, dtm::Activation::gelu})
    for (bool removed : {false, true})
      for (uint64_t seed = 0; seed < 3; ++seed) {
        ArchConfig arch = small_arch(2, act);
        arch.attention_removed = removed;
        const auto tree = oracle::jitter(dtm::init_transformer(arch, seed), seed + 100);
        dtm::Rng rng(seed + 200);
        const int64_t batch = 2, seq = 5;
        const Tensor x = oracle::random_tensor({batch * seq, 8}, rng);
        const Tensor y = run_forward(tree, arch, x, batch, seq);
        for (int64_t b = 0; b < batch; ++b) {
          oracle::Mat xm;
          for (int64_t r = 0; r < seq; ++r) xm.push_back(oracle::row_of(x, b * seq + r));
          const oracle::Mat ref = oracle::transformer_ref(xm, tree, arch);
          for (int64_t r = 0; r < seq; ++r)
            for (int64_t c = 0; c < 8; ++c) EXPECT_NEAR(y[(b * seq + r) * 8 + c], ref[size_t(r)][size_t(c)], 1e-4);
        }
      }
}

TEST(Transformer, PrefixRunsMatchFullSequence) {
  const ArchConfig arch = small_arch();
  const auto tree = oracle::jitter(dtm::init_transformer(arch, 3), 4);
  dtm::Rng rng(5);
  const int64_t seq = 6;
  const Tensor x = oracle::random_tensor({seq, 8}, rng);
  const Tensor full = run_forward(tree, arch, x, 1, seq);
  for (int64_t t = 1; t <= seq; ++t) {
    Tensor prefix({t, 8}, std::vector<float>(x.ptr(), x.ptr() + t * 8));
    const Tensor y = run_forward(tree, arch, prefix, 1, t);
    for (int64_t c = 0; c < 8; ++c) EXPECT_NEAR(y[(t - 1) * 8 + c], full[(t - 1) * 8 + c], 1e-5);
  }
}

TEST(Transformer, PerturbingPositionLeavesEarlierOutputsBitIdentical) {
  const ArchConfig arch = small_arch();
  const auto tree = oracle::jitter(dtm::init_transformer(arch, 8), 9);
  dtm::Rng rng(10);
  const int64_t seq = 6;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = oracle::random_tensor({seq, 8}, rng);
    const int64_t t = static_cast<int64_t>(rng.below(seq));
    Tensor xp = x;
    for (int64_t i = t * 8; i < seq * 8; ++i) xp[i] += static_cast<float>(rng.normal());
    const Tensor a = run_forward(tree, arch, x, 1, seq), b = run_forward(tree, arch, xp, 1, seq);
    for (int64_t i = 0; i < t * 8; ++i) EXPECT_EQ(a[i], b[i]);
    bool changed = false;
    for (int64_t c = 0; c < 8; ++c) changed |= a[t * 8 + c] != b[t * 8 + c];
    EXPECT_TRUE(changed);
  }
}

TEST(Transformer, ParameterGradientsMatchFiniteDifferences) {
  ArchConfig arch = small_arch();
  arch.n_layers = 1;
  arch.d_embed = 4;
  arch.activation = dtm::Activation::gelu;
  const auto tree = oracle::jitter(dtm::init_transformer(arch, 1), 2);
  dtm::Rng rng(3);
  const Tensor x = oracle::random_tensor({2 * 3, 4}, rng);
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& e : tree.entries()) {
    inputs.push_back(e.value);
    names.push_back(e.name);
  }
  const double err = oracle::gradient_check(
      inputs,
      [&](Graph& g, const std::vector<Var>& v) {
        dtm::ParamVars p;
        for (size_t i = 0; i < v.size(); ++i) p[names[i]] = v[i];
        return dtm::transformer_forward(g, p, arch, g.input(x), 2, 3);
      },
      4, 5e-3, {}, 1e-2);
  // Shifting every key by the same bias leaves softmax unchanged, so that gradient is
  // exactly zero and needs the absolute floor.
  EXPECT_LT(err, 1e-3);
}

TEST(Transformer, SingleTokenAttentionIsValueProjection) {
  const ArchConfig arch = small_arch(2);
  const auto tree = oracle::jitter(dtm::init_transformer(arch, 21), 22);
  dtm::Rng rng(23);
  const Tensor x = oracle::random_tensor({1, 8}, rng);
  Graph g;
  const auto p = dtm::bind_parameters(g, tree);
  std::vector<Var> probs;
  const Tensor y = g.value(dtm::attention_forward(g, p, arch, 0, g.input(x), 1, 1, &probs));
  for (float w : g.value(probs[0]).data()) EXPECT_EQ(w, 1.0f);
  oracle::Mat xm{oracle::row_of(x, 0)};
  const auto v = oracle::linear_ref(xm, tree.at("block0.attn.v.weight"), tree.at("block0.attn.v.bias"));
  const auto ref = oracle::linear_ref(v, tree.at("block0.attn.out.weight"), tree.at("block0.attn.out.bias"));
  for (int64_t c = 0; c < 8; ++c) EXPECT_NEAR(y[c], ref[0][size_t(c)], 1e-5);
}

TEST(Transformer, ZeroQueryGivesUniformCausalWeights) {
  const ArchConfig arch = small_arch(1);
  auto tree = oracle::jitter(dtm::init_transformer(arch, 31), 32);
  tree.set("block0.attn.q.weight", Tensor::zeros({8, 8}));
  tree.set("block0.attn.q.bias", Tensor::zeros({8}));
  dtm::Rng rng(33);
  const int64_t seq = 5;
  Graph g;
  const auto p = dtm::bind_parameters(g, tree);
  std::vector<Var> probs;
  dtm::attention_forward(g, p, arch, 0, g.input(oracle::random_tensor({seq, 8}, rng)), 1, seq, &probs);
  const Tensor& w = g.value(probs[0]);
  for (int64_t i = 0; i < seq; ++i)
    for (int64_t j = 0; j < seq; ++j) EXPECT_FLOAT_EQ(w[i * seq + j], j <= i ? 1.0f / float(i + 1) : 0.0f);
}

TEST(Transformer, ZeroSublayersLeaveTheResidualPath) {
  const ArchConfig arch = small_arch();
  auto tree = oracle::jitter(dtm::init_transformer(arch, 41), 42);
  const auto names = tree.names();
  for (const auto& name : names)
    if (name.find(".attn.") != std::string::npos || name.find(".mlp.") != std::string::npos)
      tree.set(name, Tensor::zeros(tree.at(name).shape()));
  dtm::Rng rng(43);
  const Tensor x = oracle::random_tensor({4, 8}, rng);
  const Tensor y = run_forward(tree, arch, x, 1, 4);
  oracle::Mat xm;
  for (int64_t r = 0; r < 4; ++r) xm.push_back(oracle::row_of(x, r));
  const auto ref = oracle::layer_norm_ref(xm, tree.at("final_ln.gamma"), tree.at("final_ln.beta"));
  for (int64_t r = 0; r < 4; ++r)
    for (int64_t c = 0; c < 8; ++c) EXPECT_NEAR(y[r * 8 + c], ref[size_t(r)][size_t(c)], 1e-5);
}

TEST(Transformer, SequenceLongerThanContextThrows) {
  const ArchConfig arch = small_arch();
  const auto tree = dtm::init_transformer(arch, 0);
  EXPECT_THROW(run_forward(tree, arch, Tensor::zeros({7, 8}), 1, 7), dtm::Error);
}

TEST(Transformer, ParameterCountMatchesClosedForm) {
  for (int64_t d : {8, 16, 128})
    for (int64_t layers : {1, 3}) {
      ArchConfig a;
      a.d_embed = d;
      a.n_layers = layers;
      const int64_t per_block = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
      EXPECT_EQ(dtm::transformer_param_count(a), layers * per_block + 2 * d);
      EXPECT_EQ(dtm::init_transformer(a, 0).numel(), dtm::transformer_param_count(a));
    }
  EXPECT_EQ(dtm::transformer_param_count(ArchConfig{}), 595072);
}

TEST(Transformer, SelectorsPartitionTheTree) {
  const ArchConfig arch;
  const auto tree = dtm::init_transformer(arch, 0);
  const auto attn = LayerSelector::attention_all(), mlp = LayerSelector::mlp_all(), ln = LayerSelector::layernorm_all();
  for (const auto& e : tree.entries()) {
    const int hits = int(attn.matches(e.name)) + int(mlp.matches(e.name)) + int(ln.matches(e.name));
    EXPECT_EQ(hits, 1) << e.name;
    EXPECT_TRUE(LayerSelector::transformer_all().matches(e.name));
    EXPECT_FALSE(LayerSelector::none().matches(e.name));
  }
  EXPECT_EQ(dtm::select(tree, LayerSelector::single(0, dtm::Sublayer::attn)).size(), 8u);
  EXPECT_TRUE(dtm::select(dtm::select(tree, attn), attn).bit_equal(dtm::select(tree, attn)));
  EXPECT_FALSE(LayerSelector::transformer_all().matches("dt.embed_state.weight"));
  EXPECT_FALSE(LayerSelector::transformer_all().matches("lm_head.out.weight"));
  EXPECT_EQ(dtm::selected_count(tree, attn) + dtm::selected_count(tree, mlp) + dtm::selected_count(tree, ln),
            tree.numel());
}

TEST(Transformer, SelectorParsingAndUnits) {
  const ArchConfig arch;
  const auto units = dtm::layer_units(arch);
  ASSERT_EQ(units.size(), 13u);
  EXPECT_EQ(units.front(), "block0.ln1");
  EXPECT_EQ(units.back(), "final_ln");
  const auto s = LayerSelector::parse("block1.attn+final_ln", arch);
  EXPECT_TRUE(s.matches("block1.attn.q.weight"));
  EXPECT_TRUE(s.matches("final_ln.gamma"));
  EXPECT_FALSE(s.matches("block0.attn.q.weight"));
  const auto pre = LayerSelector::parse("prefix:2", arch);
  EXPECT_TRUE(pre.matches("block0.attn.out.bias"));
  EXPECT_FALSE(pre.matches("block0.ln2.gamma"));
  EXPECT_EQ(dtm::layer_unit_of("block2.mlp.fc1.weight"), "block2.mlp");
  EXPECT_EQ(dtm::layer_unit_of("dt.action_head.weight"), "");
  EXPECT_THROW(LayerSelector::parse("bogus", arch), dtm::Error);
}

TEST(Transformer, SizeRatiosFollowSharedFraction) {
  const ArchConfig arch;
  const auto attn = LayerSelector::attention_all();
  const auto am = attn | LayerSelector::mlp_all();
  const auto r1 = dtm::transformer_size_ratio(attn, arch, 2);
  EXPECT_EQ(r1.total, 595072);
  EXPECT_EQ(r1.shared, 3 * 4 * (128 * 128 + 128));
  EXPECT_NEAR(r1.percent, 100.0 * (r1.f_shared + 2 * r1.f_unique), 1e-9);
  EXPECT_NEAR(dtm::transformer_size_ratio(LayerSelector::none(), arch, 2).percent, 200.0, 1e-9);
  EXPECT_NEAR(dtm::transformer_size_ratio(LayerSelector::transformer_all(), arch, 3).percent, 100.0, 1e-9);
  const auto r3 = dtm::transformer_size_ratio(am, arch, 3);
  EXPECT_EQ(r3.unique, 3 * 4 * 128 + 2 * 128);
}

TEST(Transformer, InitIsDeterministic) {
  const ArchConfig arch = small_arch();
  EXPECT_TRUE(dtm::init_transformer(arch, 5).bit_equal(dtm::init_transformer(arch, 5)));
  EXPECT_FALSE(dtm::init_transformer(arch, 5).bit_equal(dtm::init_transformer(arch, 6)));
}
