#include <gtest/gtest.h>

#include <cmath>

#include "dtmerge/merge.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace dtm;

namespace {

ParameterTree complement(const ParameterTree& t, const LayerSelector& s) {
  return t.filter([&](std::string_view n) { return !s.matches(n); });
}

struct Pair {
  OfflineDataset ds = fixture::tiny_dataset(EnvId::swing);
  DTModel a = fixture::tiny_model(ds, 1);
  DTModel b = fixture::tiny_model(ds, 2);
  ParameterTree pre = fixture::tiny_model(ds, 3).params;
  Pair() {
    // Two "finetuned" trees around a shared initialization.
    a.params = oracle::jitter(pre, 10, 0.1);
    b.params = oracle::jitter(pre, 11, 0.1);
  }
};

std::vector<LayerSelector> selectors(const ArchConfig& arch) {
  return {LayerSelector::attention_all(), LayerSelector::mlp_all(), LayerSelector::layernorm_all(),
          LayerSelector::transformer_all(), LayerSelector::single(1, Sublayer::mlp), LayerSelector::final_ln(),
          LayerSelector::depth_prefix(5, arch)};
}

}  // namespace

TEST(Merge, HandArithmetic) {
  ParameterTree t, s;
  t.add("block0.attn.q.weight", Tensor({2}, {2, 4}));
  s.add("block0.attn.q.weight", Tensor({2}, {0, 2}));
  const auto m = merge_layer(t, s, LayerSelector::attention_all(), 0.5);
  EXPECT_EQ(m.at("block0.attn.q.weight")[0], 1.0f);
  EXPECT_EQ(m.at("block0.attn.q.weight")[1], 3.0f);
}

TEST(Merge, EndpointsAreBitExact) {
  Pair P;
  for (const auto& sel : selectors(P.a.arch)) {
    EXPECT_TRUE(merge_layer(P.a.params, P.b.params, sel, 0.0).bit_equal(P.a.params)) << sel.name();
    EXPECT_TRUE(interpolate(P.a.params, P.b.params, 0.0, sel).bit_equal(P.a.params));
    const auto swapped = merge_layer(P.a.params, P.b.params, sel, 1.0);
    EXPECT_TRUE(select(swapped, sel).bit_equal(select(P.b.params, sel)));
    EXPECT_TRUE(select(interpolate(P.a.params, P.b.params, 1.0, sel), sel).bit_equal(select(P.b.params, sel)));
    EXPECT_TRUE(interpolate(P.a.params, P.a.params, 0.37, sel).bit_equal(P.a.params));
  }
}

TEST(Merge, NonSelectedEntriesAreBitInvariant) {
  Pair P;
  for (const auto& sel : selectors(P.a.arch)) {
    const std::string expect = complement(P.a.params, sel).content_hash();
    for (double p : {0.25, 0.5, 0.9}) {
      EXPECT_EQ(complement(merge_layer(P.a.params, P.b.params, sel, p), sel).content_hash(), expect);
      EXPECT_EQ(complement(interpolate(P.a.params, P.b.params, p, sel), sel).content_hash(), expect);
      for (MergeMode mode : {MergeMode::merge, MergeMode::swap, MergeMode::interpolate, MergeMode::task_arithmetic}) {
        const MergeSpec spec{sel, p, mode};
        EXPECT_EQ(complement(apply_merge(spec, P.a.params, P.b.params, &P.pre), sel).content_hash(), expect)
            << to_string(mode);
      }
    }
  }
}

TEST(Merge, ProjectionsAreNeverMerged) {
  Pair P;
  const auto m = merge_layer(P.a.params, P.b.params, LayerSelector::transformer_all(), 0.5);
  for (const auto& e : m.entries())
    if (is_projection_param(e.name)) EXPECT_TRUE(e.value.bit_equal(P.a.params.at(e.name))) << e.name;
}

TEST(Merge, TaskArithmeticEqualsAveraging) {
  Pair P;
  const auto ta = task_vector(P.a.params, P.pre), tb = task_vector(P.b.params, P.pre);
  const std::vector<ParameterTree> deltas{ta, tb};
  const auto via_tasks = apply_task_vectors(P.pre, deltas, 0.5);
  const auto via_interp = interpolate(P.a.params, P.b.params, 0.5, LayerSelector::transformer_all());
  const auto via_spec =
      apply_merge({LayerSelector::transformer_all(), 0.5, MergeMode::task_arithmetic}, P.a.params, P.b.params, &P.pre);
  for (const auto& e : via_interp.entries()) {
    if (!is_transformer_param(e.name)) continue;
    const Tensor& x = via_tasks.at(e.name);
    const Tensor& y = via_spec.at(e.name);
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      EXPECT_LE(std::fabs(x[i] - e.value[i]), 1e-6) << e.name;
      EXPECT_LE(std::fabs(y[i] - e.value[i]), 1e-6) << e.name;
      const double avg = 0.5 * (double(P.a.params.at(e.name)[i]) + P.b.params.at(e.name)[i]);
      EXPECT_LE(std::fabs(x[i] - avg), 1e-6);
    }
  }
}

TEST(Merge, TaskVectorIdentities) {
  Pair P;
  const auto zero = task_vector(P.a.params, P.a.params);
  for (const auto& e : zero.entries())
    for (float v : e.value.data()) EXPECT_EQ(v, 0.0f);
  const std::vector<ParameterTree> one{task_vector(P.a.params, P.pre)};
  const auto rec = apply_task_vectors(P.pre, one, 1.0);
  for (const auto& e : rec.entries())
    for (int64_t i = 0; i < e.value.numel(); ++i) EXPECT_LE(std::fabs(e.value[i] - P.a.params.at(e.name)[i]), 1e-6);
}

TEST(Merge, InterpolateStaysOnSegment) {
  Pair P;
  for (double lam : {0.1, 0.5, 0.77}) {
    const auto m = interpolate(P.a.params, P.b.params, lam, LayerSelector::transformer_all());
    for (const auto& e : m.entries())
      for (int64_t i = 0; i < e.value.numel(); ++i) {
        const float x = P.a.params.at(e.name)[i], y = P.b.params.at(e.name)[i];
        EXPECT_GE(e.value[i], std::min(x, y));
        EXPECT_LE(e.value[i], std::max(x, y));
      }
  }
  EXPECT_THROW(interpolate(P.a.params, P.b.params, 1.5, LayerSelector::attention_all()), Error);
  EXPECT_THROW(interpolate(P.a.params, P.b.params, -0.1, LayerSelector::attention_all()), Error);
}

TEST(Merge, ShapeMismatchNamesOffenders) {
  Pair P;
  ParameterTree bad = P.b.params;
  bad = bad.filter([](std::string_view n) { return n != "block2.mlp.fc1.bias"; });
  bad.add("block2.mlp.fc1.bias", Tensor::zeros({3}));
  try {
    merge_layer(P.a.params, bad, LayerSelector::mlp_all(), 0.5);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("block2.mlp.fc1.bias"), std::string::npos);
  }
  EXPECT_NO_THROW(merge_layer(P.a.params, bad, LayerSelector::attention_all(), 0.5));
}

TEST(Merge, InputsAreNotModified) {
  Pair P;
  const std::string ha = P.a.params.content_hash(), hb = P.b.params.content_hash();
  merge_layer(P.a.params, P.b.params, LayerSelector::transformer_all(), 0.5);
  interpolate(P.a.params, P.b.params, 0.3, LayerSelector::attention_all());
  incremental_merge(P.a.params, P.b.params, 0.5, P.a.arch);
  perturb_attention(P.a, PerturbMode::random);
  EXPECT_EQ(P.a.params.content_hash(), ha);
  EXPECT_EQ(P.b.params.content_hash(), hb);
}

TEST(Merge, IncrementalMergeGrowsOneUnitAtATime) {
  Pair P;
  const auto steps = incremental_merge(P.a.params, P.b.params, 0.5, P.a.arch);
  const auto units = layer_units(P.a.arch);
  ASSERT_EQ(steps.size(), units.size() + 1);
  EXPECT_TRUE(steps[0].tree.bit_equal(P.a.params));
  for (size_t k = 1; k < steps.size(); ++k) {
    EXPECT_EQ(steps[k].merged_units.size(), k);
    EXPECT_EQ(steps[k].merged_units.back(), units[k - 1]);
    for (const auto& e : steps[k].tree.entries()) {
      const bool same = e.value.bit_equal(steps[k - 1].tree.at(e.name));
      if (layer_unit_of(e.name) == units[k - 1])
        EXPECT_FALSE(same) << e.name;
      else
        EXPECT_TRUE(same) << e.name;
    }
  }
  const auto full = interpolate(P.a.params, P.b.params, 0.5, LayerSelector::transformer_all());
  EXPECT_TRUE(steps.back().tree.bit_equal(full));
}

TEST(Merge, L2DistanceMatchesBruteForce) {
  Pair P;
  const auto d = l2_distance(P.a.params, P.b.params, P.a.arch);
  const auto units = layer_units(P.a.arch);
  ASSERT_EQ(d.size(), units.size());
  double total2 = 0.0;
  for (size_t u = 0; u < units.size(); ++u) {
    EXPECT_EQ(d[u].first, units[u]);
    double s = 0.0;
    for (const auto& e : P.a.params.entries()) {
      if (layer_unit_of(e.name) != units[u]) continue;
      for (int64_t i = 0; i < e.value.numel(); ++i) {
        const double diff = double(e.value[i]) - P.b.params.at(e.name)[i];
        s += diff * diff;
      }
    }
    total2 += s;
    EXPECT_NEAR(d[u].second, std::sqrt(s), 1e-5);
  }
  const auto whole = l2_distance(P.a.params, P.b.params, P.a.arch, false);
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_NEAR(whole[0].second, std::sqrt(total2), 1e-5);
  for (const auto& [u, v] : l2_distance(P.a.params, P.a.params, P.a.arch)) EXPECT_EQ(v, 0.0) << u;
}

TEST(Merge, L2DistanceSingleWeight) {
  Pair P;
  ParameterTree b = P.a.params;
  Tensor w = b.at("block1.mlp.fc2.weight");
  w[5] += 0.375f;
  b.set("block1.mlp.fc2.weight", w);
  for (const auto& [u, v] : l2_distance(P.a.params, b, P.a.arch)) {
    if (u == "block1.mlp")
      EXPECT_NEAR(v, 0.375, 1e-6);
    else
      EXPECT_EQ(v, 0.0);
  }
}

TEST(Perturb, IdentityModeSetsOnesAndZeros) {
  Pair P;
  const DTModel m = perturb_attention(P.a, PerturbMode::identity);
  for (const auto& e : m.params.entries()) {
    if (!LayerSelector::attention_all().matches(e.name)) {
      EXPECT_TRUE(e.value.bit_equal(P.a.params.at(e.name)));
      continue;
    }
    const float expect = e.name.ends_with(".weight") ? 1.0f : 0.0f;
    for (float v : e.value.data()) EXPECT_EQ(v, expect) << e.name;
  }
}

TEST(Perturb, EyeModeUsesIdentityMatrices) {
  Pair P;
  const DTModel m = perturb_attention(P.a, PerturbMode::eye);
  const Tensor& w = m.params.at("block0.attn.v.weight");
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j) EXPECT_EQ(w[i * 8 + j], i == j ? 1.0f : 0.0f);
}

TEST(Perturb, RandomModeIsFixedPerSeed) {
  Pair P;
  const DTModel a = perturb_attention(P.a, PerturbMode::random, 17);
  const DTModel b = perturb_attention(P.b, PerturbMode::random, 17);
  EXPECT_TRUE(select(a.params, LayerSelector::attention_all()).bit_equal(select(b.params, LayerSelector::attention_all())));
  EXPECT_FALSE(select(a.params, LayerSelector::attention_all())
                   .bit_equal(select(P.a.params, LayerSelector::attention_all())));
  EXPECT_EQ(perturb_attention(P.a, PerturbMode::random, 17).params.content_hash(), a.params.content_hash());
  EXPECT_EQ(complement(a.params, LayerSelector::attention_all()).content_hash(),
            complement(P.a.params, LayerSelector::attention_all()).content_hash());
}

TEST(Perturb, RemovedModeZeroesTheAttentionContribution) {
  Pair P;
  const DTModel removed = perturb_attention(P.a, PerturbMode::removed);
  EXPECT_TRUE(removed.arch.attention_removed);
  EXPECT_TRUE(removed.params.bit_equal(P.a.params));
  // Removing the flag but zeroing the attention output projection must give the same
  // forward pass: the sublayer then contributes exactly zero.
  DTModel zeroed = P.a;
  for (int64_t b = 0; b < zeroed.arch.n_layers; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".attn.out.";
    zeroed.params.set(pre + "weight", Tensor::zeros(zeroed.params.at(pre + "weight").shape()));
    zeroed.params.set(pre + "bias", Tensor::zeros(zeroed.params.at(pre + "bias").shape()));
  }
  const DTBatch batch = sample_batch(P.ds, 3, fixture::kTinyK, 4);
  auto run = [&](const DTModel& m) {
    ad::Graph g;
    const ParamVars p = bind_parameters(g, m.params);
    return g.value(dt_forward(g, p, m, batch).actions);
  };
  EXPECT_TRUE(run(removed).bit_equal(run(zeroed)));
  EXPECT_THROW(perturb_mode_from_string("scramble"), Error);
}
