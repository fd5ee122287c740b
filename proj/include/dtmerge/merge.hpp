#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dtmerge/dt_policy.hpp"
#include "dtmerge/param_tree.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

// Selected entries become (1 - p) * target + p * source; everything else is copied from
// target unchanged. p = 0 and p = 1 copy bytes exactly.
ParameterTree merge_layer(const ParameterTree& target, const ParameterTree& source, const LayerSelector& selector,
                          double p);

// (1 - lambda) * A + lambda * B on the selection, A elsewhere.
ParameterTree interpolate(const ParameterTree& a, const ParameterTree& b, double lambda,
                          const LayerSelector& selector);

// theta - pre, entry by entry, over the names the two trees share.
ParameterTree task_vector(const ParameterTree& theta, const ParameterTree& pre);
// pre + scale * sum(deltas); entries missing from a delta are treated as zero.
ParameterTree apply_task_vectors(const ParameterTree& pre, std::span<const ParameterTree> deltas, double scale);

enum class MergeMode { merge, swap, interpolate, task_arithmetic };
std::string_view to_string(MergeMode m);
MergeMode merge_mode_from_string(std::string_view s);

struct MergeSpec {
  LayerSelector selector = LayerSelector::none();
  double coefficient = 0.5;
  MergeMode mode = MergeMode::merge;
};

// Applies spec with `target` as the tree being updated. task_arithmetic needs `pre` and
// returns pre + coefficient * (tau_target + tau_source) on the selection.
ParameterTree apply_merge(const MergeSpec& spec, const ParameterTree& target, const ParameterTree& source,
                          const ParameterTree* pre = nullptr);

struct IncrementalStep {
  int64_t k = 0;
  std::vector<std::string> merged_units;
  ParameterTree tree;
};

// k = 0 .. len(layer_units): step k merges the first k units of the depth order.
std::vector<IncrementalStep> incremental_merge(const ParameterTree& target, const ParameterTree& source, double p,
                                               const ArchConfig& arch);

// Euclidean distance per layer unit (every parameter of the unit, LN affine included), in
// depth order. With per_layer = false a single "transformer" entry covers all units.
std::vector<std::pair<std::string, double>> l2_distance(const ParameterTree& a, const ParameterTree& b,
                                                        const ArchConfig& arch, bool per_layer = true);

// random: fresh seeded initialization; identity: weights all 1, biases 0; eye: identity
// matrices, biases 0; removed: forward flag, weights untouched.
enum class PerturbMode { random, identity, eye, removed };
std::string_view to_string(PerturbMode m);
PerturbMode perturb_mode_from_string(std::string_view s);

DTModel perturb_attention(const DTModel& model, PerturbMode mode, uint64_t seed = 17);

}  // namespace dtm
