#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dtmerge/autodiff.hpp"
#include "dtmerge/param_tree.hpp"

namespace dtm {

enum class Activation { relu, gelu };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct ArchConfig {
  int64_t n_layers = 3;
  int64_t n_heads = 1;
  int64_t d_embed = 128;
  int64_t context_positions = 60;  // tokens, i.e. 3K for a DT with K = 20
  int64_t mlp_ratio = 4;
  Activation activation = Activation::relu;
  float dropout = 0.1f;
  // Forward flag: attention sublayers contribute exactly zero to the residual stream.
  bool attention_removed = false;

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

// Canonical parameter-name grammar:
//   block{i}.ln1.{gamma|beta}
//   block{i}.attn.{q|k|v|out}.{weight|bias}
//   block{i}.ln2.{gamma|beta}
//   block{i}.mlp.{fc1|fc2}.{weight|bias}
//   final_ln.{gamma|beta}
// Weights are stored [in, out]; activations are rows.
enum class Sublayer { ln1, attn, ln2, mlp };

std::string_view to_string(Sublayer s);

// A named merge/freeze unit such as "block1.attn" or "final_ln", in depth order.
std::vector<std::string> layer_units(const ArchConfig& arch);
// Layer unit owning a parameter name, or "" for non-transformer parameters.
std::string layer_unit_of(std::string_view name);
bool is_transformer_param(std::string_view name);

ParameterTree init_transformer(const ArchConfig& arch, uint64_t seed);
int64_t transformer_param_count(const ArchConfig& arch);

// Deterministic predicate over parameter names. Selectors only ever match transformer
// parameters; projections and heads are outside every selection.
class LayerSelector {
 public:
  static LayerSelector none();
  static LayerSelector attention_all();
  static LayerSelector mlp_all();
  static LayerSelector layernorm_all();
  static LayerSelector transformer_all();
  static LayerSelector single(int64_t block, Sublayer sublayer);
  static LayerSelector final_ln();
  static LayerSelector unit(std::string unit_name);
  // First k layer units in depth order.
  static LayerSelector depth_prefix(int64_t k, const ArchConfig& arch);
  // Accepts "none", "attention", "mlp", "layernorm", "transformer", a unit name such as
  // "block0.attn" or "final_ln", "prefix:K", and unions joined with '+'.
  static LayerSelector parse(std::string_view text, const ArchConfig& arch);

  bool matches(std::string_view name) const;
  const std::string& name() const { return name_; }
  LayerSelector operator|(const LayerSelector& other) const;

 private:
  LayerSelector(std::string name, std::function<bool(std::string_view)> pred);
  std::string name_;
  std::function<bool(std::string_view)> pred_;
};

ParameterTree select(const ParameterTree& tree, const LayerSelector& selector);
int64_t selected_count(const ParameterTree& tree, const LayerSelector& selector);

// Parameters registered on a graph, addressed by canonical name.
using ParamVars = std::unordered_map<std::string, ad::Var>;

// Registers every entry; frozen entries and those failing `trainable` become constants.
ParamVars bind_parameters(ad::Graph& g, const ParameterTree& tree,
                          const std::function<bool(std::string_view)>& trainable = nullptr);

ad::Var param(const ParamVars& p, const std::string& name);

// x: [batch * seq, d]. Returns the attention sublayer output (before the residual add).
// probs, when non-null, receives the [batch*heads, seq, seq] attention weights.
ad::Var attention_forward(ad::Graph& g, const ParamVars& p, const ArchConfig& arch, int64_t block, ad::Var x,
                          int64_t batch, int64_t seq, std::vector<ad::Var>* probs = nullptr);
ad::Var block_forward(ad::Graph& g, const ParamVars& p, const ArchConfig& arch, int64_t block, ad::Var x,
                      int64_t batch, int64_t seq, std::vector<ad::Var>* probs = nullptr);
// Pre-LN stack: each sublayer computes x + f(LN(x)); final_ln after the last block.
ad::Var transformer_forward(ad::Graph& g, const ParamVars& p, const ArchConfig& arch, ad::Var x, int64_t batch,
                            int64_t seq, std::vector<ad::Var>* probs = nullptr);

}  // namespace dtm
