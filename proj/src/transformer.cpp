#include "dtmerge/transformer.hpp"

#include <cmath>

#include "dtmerge/rng.hpp"

namespace dtm {

using ad::Graph;
using ad::Var;

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw Error("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(Sublayer s) {
  switch (s) {
    case Sublayer::ln1: return "ln1";
    case Sublayer::attn: return "attn";
    case Sublayer::ln2: return "ln2";
    case Sublayer::mlp: return "mlp";
  }
  return "?";
}

void ArchConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_embed <= 0 || context_positions <= 0 || mlp_ratio <= 0)
    throw Error("arch config: all counts must be positive");
  if (d_embed % n_heads != 0) throw Error("arch config: d_embed must be divisible by n_heads");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw Error("arch config: dropout must be in [0, 1)");
}

namespace {

std::string blk(int64_t i) { return "block" + std::to_string(i); }

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

}  // namespace

std::vector<std::string> layer_units(const ArchConfig& arch) {
  std::vector<std::string> out;
  for (int64_t i = 0; i < arch.n_layers; ++i)
    for (Sublayer s : {Sublayer::ln1, Sublayer::attn, Sublayer::ln2, Sublayer::mlp})
      out.push_back(blk(i) + "." + std::string(to_string(s)));
  out.push_back("final_ln");
  return out;
}

std::string layer_unit_of(std::string_view name) {
  if (starts_with(name, "final_ln.")) return "final_ln";
  if (!starts_with(name, "block")) return "";
  const size_t dot1 = name.find('.');
  if (dot1 == std::string_view::npos) return "";
  const size_t dot2 = name.find('.', dot1 + 1);
  if (dot2 == std::string_view::npos) return "";
  return std::string(name.substr(0, dot2));
}

bool is_transformer_param(std::string_view name) { return !layer_unit_of(name).empty(); }

ParameterTree init_transformer(const ArchConfig& arch, uint64_t seed) {
  arch.validate();
  ParameterTree tree;
  const int64_t d = arch.d_embed, h = arch.d_embed * arch.mlp_ratio;
  auto normal = [&](const std::string& name, Shape shape) {
    Rng rng(derive_seed(seed, name));
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.02));
    tree.add(name, std::move(t));
  };
  auto ln = [&](const std::string& prefix) {
    tree.add(prefix + ".gamma", Tensor::full({d}, 1.0f));
    tree.add(prefix + ".beta", Tensor::zeros({d}));
  };
  for (int64_t i = 0; i < arch.n_layers; ++i) {
    const std::string b = blk(i);
    ln(b + ".ln1");
    for (const char* proj : {"q", "k", "v", "out"}) {
      normal(b + ".attn." + proj + ".weight", {d, d});
      tree.add(b + ".attn." + proj + ".bias", Tensor::zeros({d}));
    }
    ln(b + ".ln2");
    normal(b + ".mlp.fc1.weight", {d, h});
    tree.add(b + ".mlp.fc1.bias", Tensor::zeros({h}));
    normal(b + ".mlp.fc2.weight", {h, d});
    tree.add(b + ".mlp.fc2.bias", Tensor::zeros({d}));
  }
  ln("final_ln");
  return tree;
}

int64_t transformer_param_count(const ArchConfig& arch) {
  const int64_t d = arch.d_embed, h = arch.d_embed * arch.mlp_ratio;
  const int64_t attn = 4 * (d * d + d);
  const int64_t mlp = d * h + h + h * d + d;
  const int64_t lns = 2 * 2 * d;
  return arch.n_layers * (attn + mlp + lns) + 2 * d;
}

// ---------------------------------------------------------------------------
// Selectors

LayerSelector::LayerSelector(std::string name, std::function<bool(std::string_view)> pred)
    : name_(std::move(name)), pred_(std::move(pred)) {}

LayerSelector LayerSelector::none() {
  return LayerSelector("none", [](std::string_view) { return false; });
}

LayerSelector LayerSelector::attention_all() {
  return LayerSelector("attention", [](std::string_view n) {
    const std::string u = layer_unit_of(n);
    return u.size() > 5 && u.ends_with(".attn");
  });
}

LayerSelector LayerSelector::mlp_all() {
  return LayerSelector("mlp", [](std::string_view n) { return layer_unit_of(n).ends_with(".mlp"); });
}

LayerSelector LayerSelector::layernorm_all() {
  return LayerSelector("layernorm", [](std::string_view n) {
    const std::string u = layer_unit_of(n);
    return u == "final_ln" || u.ends_with(".ln1") || u.ends_with(".ln2");
  });
}

LayerSelector LayerSelector::transformer_all() {
  return LayerSelector("transformer", [](std::string_view n) { return is_transformer_param(n); });
}

LayerSelector LayerSelector::single(int64_t block, Sublayer sublayer) {
  return unit(blk(block) + "." + std::string(to_string(sublayer)));
}

LayerSelector LayerSelector::final_ln() { return unit("final_ln"); }

LayerSelector LayerSelector::unit(std::string unit_name) {
  std::string label = unit_name;
  return LayerSelector(std::move(label), [u = std::move(unit_name)](std::string_view n) { return layer_unit_of(n) == u; });
}

LayerSelector LayerSelector::depth_prefix(int64_t k, const ArchConfig& arch) {
  const std::vector<std::string> units = layer_units(arch);
  if (k < 0 || k > static_cast<int64_t>(units.size()))
    throw Error("depth_prefix: k=" + std::to_string(k) + " outside [0, " + std::to_string(units.size()) + "]");
  std::vector<std::string> chosen(units.begin(), units.begin() + k);
  return LayerSelector("prefix:" + std::to_string(k), [chosen = std::move(chosen)](std::string_view n) {
    const std::string u = layer_unit_of(n);
    if (u.empty()) return false;
    for (const std::string& c : chosen)
      if (c == u) return true;
    return false;
  });
}

LayerSelector LayerSelector::parse(std::string_view text, const ArchConfig& arch) {
  if (text.empty()) throw Error("selector: empty selector");
  const size_t plus = text.find('+');
  if (plus != std::string_view::npos) return parse(text.substr(0, plus), arch) | parse(text.substr(plus + 1), arch);
  if (text == "none") return none();
  if (text == "attention" || text == "attention_all") return attention_all();
  if (text == "mlp" || text == "mlp_all") return mlp_all();
  if (text == "layernorm" || text == "layernorm_all") return layernorm_all();
  if (text == "transformer" || text == "transformer_all") return transformer_all();
  if (starts_with(text, "prefix:")) return depth_prefix(std::stoll(std::string(text.substr(7))), arch);
  for (const std::string& u : layer_units(arch))
    if (u == text) return unit(u);
  throw Error("selector: unknown selector '" + std::string(text) + "'");
}

bool LayerSelector::matches(std::string_view name) const { return pred_(name); }

LayerSelector LayerSelector::operator|(const LayerSelector& other) const {
  return LayerSelector(name_ + "+" + other.name_,
                       [a = pred_, b = other.pred_](std::string_view n) { return a(n) || b(n); });
}

ParameterTree select(const ParameterTree& tree, const LayerSelector& selector) {
  return tree.filter([&](std::string_view n) { return selector.matches(n); });
}

int64_t selected_count(const ParameterTree& tree, const LayerSelector& selector) {
  int64_t n = 0;
  for (const auto& e : tree.entries())
    if (selector.matches(e.name)) n += e.value.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Forward

ParamVars bind_parameters(Graph& g, const ParameterTree& tree, const std::function<bool(std::string_view)>& trainable) {
  ParamVars vars;
  for (const auto& e : tree.entries()) {
    const bool train = !e.frozen && (!trainable || trainable(e.name));
    vars.emplace(e.name, g.parameter(e.name, e.value, train));
  }
  return vars;
}

Var param(const ParamVars& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw Error("model: missing parameter '" + name + "'");
  return it->second;
}

namespace {

Var linear(Graph& g, const ParamVars& p, const std::string& prefix, Var x) {
  return g.add(g.matmul(x, param(p, prefix + ".weight")), param(p, prefix + ".bias"));
}

Var norm(Graph& g, const ParamVars& p, const std::string& prefix, Var x) {
  return g.layer_norm(x, param(p, prefix + ".gamma"), param(p, prefix + ".beta"));
}

}  // namespace

Var attention_forward(Graph& g, const ParamVars& p, const ArchConfig& arch, int64_t block, Var x, int64_t batch,
                      int64_t seq, std::vector<Var>* probs) {
  if (seq > arch.context_positions)
    throw Error("attention: sequence of " + std::to_string(seq) + " exceeds context of " +
                std::to_string(arch.context_positions));
  const std::string b = blk(block) + ".attn.";
  const int64_t heads = arch.n_heads;
  const int64_t head_dim = arch.d_embed / heads;
  Var q = g.split_heads(linear(g, p, b + "q", x), batch, seq, heads);
  Var k = g.split_heads(linear(g, p, b + "k", x), batch, seq, heads);
  Var v = g.split_heads(linear(g, p, b + "v", x), batch, seq, heads);
  Var scores = g.scale(g.bmm(q, k, /*transpose_b=*/true), 1.0f / std::sqrt(static_cast<float>(head_dim)));
  Var weights = g.softmax(scores, /*causal=*/true);
  if (probs) probs->push_back(weights);
  weights = g.dropout(weights, arch.dropout);
  Var y = g.merge_heads(g.bmm(weights, v), batch, seq, heads);
  return linear(g, p, b + "out", y);
}

Var block_forward(Graph& g, const ParamVars& p, const ArchConfig& arch, int64_t block, Var x, int64_t batch,
                  int64_t seq, std::vector<Var>* probs) {
  const std::string b = blk(block);
  if (!arch.attention_removed) {
    Var a = attention_forward(g, p, arch, block, norm(g, p, b + ".ln1", x), batch, seq, probs);
    x = g.add(x, g.dropout(a, arch.dropout));
  }
  Var h = linear(g, p, b + ".mlp.fc1", norm(g, p, b + ".ln2", x));
  h = arch.activation == Activation::relu ? g.relu(h) : g.gelu(h);
  h = linear(g, p, b + ".mlp.fc2", h);
  return g.add(x, g.dropout(h, arch.dropout));
}

Var transformer_forward(Graph& g, const ParamVars& p, const ArchConfig& arch, Var x, int64_t batch, int64_t seq,
                        std::vector<Var>* probs) {
  if (seq > arch.context_positions)
    throw Error("transformer: sequence of " + std::to_string(seq) + " exceeds context of " +
                std::to_string(arch.context_positions));
  for (int64_t i = 0; i < arch.n_layers; ++i) x = block_forward(g, p, arch, i, x, batch, seq, probs);
  return norm(g, p, "final_ln", x);
}

}  // namespace dtm
