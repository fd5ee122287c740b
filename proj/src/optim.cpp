#include "dtmerge/optim.hpp"

#include <algorithm>
#include <cmath>

namespace dtm {

double scheduled_lr(const AdamConfig& config, int64_t step) {
  if (config.warmup_steps <= 0) return config.lr;
  return config.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(config.warmup_steps));
}

void optimizer_step(ParameterTree& params, const ad::GradientMap& grads, OptimizerState& state,
                    const std::function<bool(std::string_view)>& active) {
  auto skip = [&](const ParameterTree::Entry& e) { return e.frozen || (active && !active(e.name)); };
  for (const auto& e : params.entries()) {
    if (skip(e)) continue;
    auto it = grads.find(e.name);
    if (it == grads.end()) throw Error("optimizer_step: missing gradient for unfrozen parameter '" + e.name + "'");
    if (it->second.shape() != e.value.shape()) throw ShapeError("optimizer_step " + e.name, e.value.shape(), it->second.shape());
  }
  const int64_t t = ++state.step;
  const AdamConfig& c = state.config;
  const double lr = scheduled_lr(c, t);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (const auto& e : params.entries()) {
    if (skip(e)) continue;
    const Tensor& g = grads.at(e.name);
    Tensor& m = state.first_moment[e.name];
    Tensor& v = state.second_moment[e.name];
    if (m.shape() != e.value.shape() || m.numel() != e.value.numel()) m = Tensor(e.value.shape());
    if (v.shape() != e.value.shape() || v.numel() != e.value.numel()) v = Tensor(e.value.shape());
    Tensor p = e.value;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double pi = p[i];
      pi -= lr * c.weight_decay * pi;
      pi -= lr * mhat / (std::sqrt(vhat) + c.eps);
      p[i] = static_cast<float>(pi);
    }
    params.set(e.name, std::move(p));
  }
}

double clip_grad_norm(ad::GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& [name, g] : grads)
      for (float& v : g.mutable_data()) v *= s;
  }
  return norm;
}

}  // namespace dtm
