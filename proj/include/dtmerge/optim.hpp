#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "dtmerge/autodiff.hpp"
#include "dtmerge/param_tree.hpp"

namespace dtm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
  int64_t warmup_steps = 100;  // linear warmup of the learning rate
};

struct OptimizerState {
  AdamConfig config;
  int64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
};

// Learning rate in effect for 1-based step t.
double scheduled_lr(const AdamConfig& config, int64_t step);

// One AdamW update. Frozen entries (and entries rejected by `active`) are skipped and
// stay bit-identical; every other entry needs a gradient.
void optimizer_step(ParameterTree& params, const ad::GradientMap& grads, OptimizerState& state,
                    const std::function<bool(std::string_view)>& active = nullptr);

// Rescales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ad::GradientMap& grads, double max_norm);

}  // namespace dtm
