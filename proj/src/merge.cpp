#include "dtmerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dtmerge/rng.hpp"

namespace dtm {

namespace {

void check_coefficient(const char* op, double c) {
  if (!(c >= 0.0 && c <= 1.0)) throw Error(std::string(op) + ": coefficient must lie in [0, 1], got " + std::to_string(c));
}

// Names in the selection whose shapes disagree (or that are missing from `other`).
void check_compatible(const char* op, const ParameterTree& target, const ParameterTree& other,
                      const LayerSelector& selector) {
  std::string bad;
  for (const auto& e : target.entries()) {
    if (!selector.matches(e.name)) continue;
    if (!other.contains(e.name)) {
      bad += " " + e.name + "(missing)";
    } else if (other.at(e.name).shape() != e.value.shape()) {
      bad += " " + e.name + shape_str(e.value.shape()) + "vs" + shape_str(other.at(e.name).shape());
    }
  }
  if (!bad.empty()) throw ShapeError(std::string(op) + ": incompatible selection:" + bad);
}

Tensor blend(const Tensor& t, const Tensor& s, double p) {
  if (p == 0.0) return t;
  if (p == 1.0) return s;
  Tensor out(t.shape());
  const float* a = t.ptr();
  const float* b = s.ptr();
  float* o = out.mutable_ptr();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] = static_cast<float>((1.0 - p) * a[i] + p * b[i]);
  return out;
}

}  // namespace

ParameterTree merge_layer(const ParameterTree& target, const ParameterTree& source, const LayerSelector& selector,
                          double p) {
  check_coefficient("merge_layer", p);
  check_compatible("merge_layer", target, source, selector);
  ParameterTree out;
  for (const auto& e : target.entries()) {
    if (selector.matches(e.name)) {
      out.add(e.name, blend(e.value, source.at(e.name), p), e.frozen);
    } else {
      out.add(e.name, e.value, e.frozen);
    }
  }
  return out;
}

ParameterTree interpolate(const ParameterTree& a, const ParameterTree& b, double lambda,
                          const LayerSelector& selector) {
  check_coefficient("interpolate", lambda);
  return merge_layer(a, b, selector, lambda);
}

ParameterTree task_vector(const ParameterTree& theta, const ParameterTree& pre) {
  ParameterTree out;
  for (const auto& e : theta.entries()) {
    if (!pre.contains(e.name)) continue;
    const Tensor& base = pre.at(e.name);
    if (base.shape() != e.value.shape()) throw ShapeError("task_vector " + e.name, e.value.shape(), base.shape());
    Tensor d(e.value.shape());
    for (int64_t i = 0; i < d.numel(); ++i) d[i] = e.value[i] - base[i];
    out.add(e.name, std::move(d));
  }
  return out;
}

ParameterTree apply_task_vectors(const ParameterTree& pre, std::span<const ParameterTree> deltas, double scale) {
  for (const auto& delta : deltas) {
    for (const auto& e : delta.entries()) {
      if (!pre.contains(e.name)) throw Error("apply_task_vectors: delta entry '" + e.name + "' not in base tree");
      if (pre.at(e.name).shape() != e.value.shape())
        throw ShapeError("apply_task_vectors " + e.name, pre.at(e.name).shape(), e.value.shape());
    }
  }
  ParameterTree out;
  for (const auto& e : pre.entries()) {
    std::vector<const Tensor*> parts;
    for (const auto& delta : deltas)
      if (delta.contains(e.name)) parts.push_back(&delta.at(e.name));
    if (parts.empty()) {
      out.add(e.name, e.value, e.frozen);
      continue;
    }
    Tensor t(e.value.shape());
    for (int64_t i = 0; i < t.numel(); ++i) {
      double sum = 0.0;
      for (const Tensor* d : parts) sum += (*d)[i];
      t[i] = static_cast<float>(e.value[i] + scale * sum);
    }
    out.add(e.name, std::move(t), e.frozen);
  }
  return out;
}

std::string_view to_string(MergeMode m) {
  switch (m) {
    case MergeMode::merge: return "merge";
    case MergeMode::swap: return "swap";
    case MergeMode::interpolate: return "interpolate";
    case MergeMode::task_arithmetic: return "task_arithmetic";
  }
  return "?";
}

MergeMode merge_mode_from_string(std::string_view s) {
  for (MergeMode m : {MergeMode::merge, MergeMode::swap, MergeMode::interpolate, MergeMode::task_arithmetic})
    if (s == to_string(m)) return m;
  throw Error("unknown merge mode '" + std::string(s) + "'");
}

ParameterTree apply_merge(const MergeSpec& spec, const ParameterTree& target, const ParameterTree& source,
                          const ParameterTree* pre) {
  switch (spec.mode) {
    case MergeMode::merge:
    case MergeMode::interpolate:
      return merge_layer(target, source, spec.selector, spec.coefficient);
    case MergeMode::swap:
      return merge_layer(target, source, spec.selector, 1.0);
    case MergeMode::task_arithmetic: {
      if (pre == nullptr) throw Error("apply_merge: task_arithmetic needs the shared initialization");
      check_coefficient("apply_merge", spec.coefficient);
      check_compatible("apply_merge", target, source, spec.selector);
      check_compatible("apply_merge", target, *pre, spec.selector);
      const ParameterTree sel_pre = select(*pre, spec.selector);
      const ParameterTree deltas[] = {task_vector(select(target, spec.selector), sel_pre),
                                      task_vector(select(source, spec.selector), sel_pre)};
      ParameterTree merged = apply_task_vectors(sel_pre, deltas, spec.coefficient);
      ParameterTree out = target;
      out.update_from(merged);
      return out;
    }
  }
  throw Error("apply_merge: bad mode");
}

std::vector<IncrementalStep> incremental_merge(const ParameterTree& target, const ParameterTree& source, double p,
                                               const ArchConfig& arch) {
  check_coefficient("incremental_merge", p);
  const std::vector<std::string> units = layer_units(arch);
  check_compatible("incremental_merge", target, source, LayerSelector::transformer_all());
  std::vector<IncrementalStep> steps;
  steps.reserve(units.size() + 1);
  ParameterTree current = target;
  steps.push_back({0, {}, current});
  for (size_t k = 0; k < units.size(); ++k) {
    current = merge_layer(current, source, LayerSelector::unit(units[k]), p);
    IncrementalStep s;
    s.k = static_cast<int64_t>(k + 1);
    s.merged_units.assign(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(k + 1));
    s.tree = current;
    steps.push_back(std::move(s));
  }
  return steps;
}

std::vector<std::pair<std::string, double>> l2_distance(const ParameterTree& a, const ParameterTree& b,
                                                        const ArchConfig& arch, bool per_layer) {
  check_compatible("l2_distance", a, b, LayerSelector::transformer_all());
  std::map<std::string, double> sq;
  for (const auto& e : a.entries()) {
    const std::string unit = layer_unit_of(e.name);
    if (unit.empty()) continue;
    const Tensor& other = b.at(e.name);
    double s = 0.0;
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      const double d = static_cast<double>(e.value[i]) - other[i];
      s += d * d;
    }
    sq[per_layer ? unit : "transformer"] += s;
  }
  std::vector<std::pair<std::string, double>> out;
  if (!per_layer) {
    out.emplace_back("transformer", std::sqrt(sq["transformer"]));
    return out;
  }
  for (const auto& u : layer_units(arch)) out.emplace_back(u, std::sqrt(sq[u]));
  return out;
}

std::string_view to_string(PerturbMode m) {
  switch (m) {
    case PerturbMode::random: return "random";
    case PerturbMode::identity: return "identity";
    case PerturbMode::eye: return "eye";
    case PerturbMode::removed: return "removed";
  }
  return "?";
}

PerturbMode perturb_mode_from_string(std::string_view s) {
  for (PerturbMode m : {PerturbMode::random, PerturbMode::identity, PerturbMode::eye, PerturbMode::removed})
    if (s == to_string(m)) return m;
  throw Error("unknown perturbation mode '" + std::string(s) + "' (expected random, identity, eye or removed)");
}

DTModel perturb_attention(const DTModel& model, PerturbMode mode, uint64_t seed) {
  const LayerSelector attn = LayerSelector::attention_all();
  if (selected_count(model.params, attn) == 0) throw Error("perturb_attention: model has no attention parameters");
  DTModel out = model;
  if (mode == PerturbMode::removed) {
    out.arch.attention_removed = true;
    return out;
  }
  const ParameterTree fresh = mode == PerturbMode::random ? init_transformer(model.arch, derive_seed(seed, "perturb"))
                                                          : ParameterTree{};
  for (const auto& e : model.params.entries()) {
    if (!attn.matches(e.name)) continue;
    const bool is_bias = e.name.ends_with(".bias");
    Tensor t(e.value.shape());
    switch (mode) {
      case PerturbMode::random:
        t = fresh.at(e.name);
        break;
      case PerturbMode::identity:
        if (!is_bias) t = Tensor::full(e.value.shape(), 1.0f);
        break;
      case PerturbMode::eye:
        if (!is_bias) {
          const int64_t n = std::min(t.dim(0), t.dim(1));
          for (int64_t i = 0; i < n; ++i) t[i * t.dim(1) + i] = 1.0f;
        }
        break;
      case PerturbMode::removed:
        break;
    }
    out.params.set(e.name, std::move(t));
  }
  return out;
}

}  // namespace dtm
