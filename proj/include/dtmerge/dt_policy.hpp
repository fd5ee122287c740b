#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dtmerge/autodiff.hpp"
#include "dtmerge/env.hpp"
#include "dtmerge/optim.hpp"
#include "dtmerge/param_tree.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

// What a DT knows about the task it was trained for.
struct EnvBinding {
  std::string env;
  int64_t state_dim = 0;
  int64_t action_dim = 0;
  int64_t max_timestep = 0;  // size of the timestep embedding table
  double rtg_scale = 1.0;    // RTG inputs are divided by this
  double max_return = 0.0;   // best return in the training data
  ReferenceReturns refs;

  static EnvBinding from_dataset(const OfflineDataset& ds);
};

// Per-env parameters live under "dt.", the shared transformer under the canonical names,
// and an optional language-model head under "lm_head.".
struct DTModel {
  ArchConfig arch;
  int64_t context_len = 20;  // K transitions; the transformer sees 3K tokens
  EnvBinding env;
  ParameterTree params;
};

DTModel init_dt_model(const ArchConfig& arch, const EnvBinding& env, uint64_t seed, int64_t context_len = 20);
// Fresh per-env projections and heads for the given binding (no transformer entries).
ParameterTree init_dt_projections(const ArchConfig& arch, const EnvBinding& env, uint64_t seed);
ParameterTree transformer_part(const ParameterTree& params);
bool is_projection_param(std::string_view name);

// One training row per window; padding is on the right and masked out of the loss.
struct DTBatch {
  int64_t batch = 0;
  int64_t len = 0;  // K
  int64_t state_dim = 0;
  int64_t action_dim = 0;
  std::vector<float> rtg;        // [B x K], unscaled
  std::vector<float> states;     // [B x K x state_dim]
  std::vector<float> actions;    // [B x K x action_dim]
  std::vector<int32_t> timesteps;  // [B x K]
  std::vector<float> mask;       // [B x K], 1 for real positions

  DTBatch() = default;
  DTBatch(int64_t b, int64_t k, int64_t sd, int64_t ad);
};

// Fills row `row` of the batch from trajectory positions [start, start + K).
void tokenize(const Trajectory& tr, std::span<const double> rtg, int64_t start, DTBatch& batch, int64_t row);

enum class TokenKind { rtg, state, action };
struct Token {
  TokenKind kind;
  int32_t timestep;
  std::vector<float> values;
};
// Row `row` as the (R_t, s_t, a_t) token stream seen by the transformer, padding dropped.
std::vector<Token> interleave_tokens(const DTBatch& batch, int64_t row);
DTBatch deinterleave_tokens(std::span<const Token> tokens, int64_t len, int64_t state_dim, int64_t action_dim);

DTBatch sample_batch(const OfflineDataset& ds, int64_t batch_size, int64_t context_len, uint64_t seed);

struct DTForward {
  ad::Var actions;           // [B, K, action_dim] in [-1, 1]
  ad::Var token_embeddings;  // [B, 3K, d] before the embedding layer norm
  std::vector<ad::Var> attention;  // one [B*heads, 3K, 3K] per block when requested
};

// [B, 3K, d] token embeddings (projection + timestep embedding), before the layer norm.
ad::Var dt_embed_tokens(ad::Graph& g, const ParamVars& p, const DTModel& model, const DTBatch& batch);

DTForward dt_forward(ad::Graph& g, const ParamVars& p, const DTModel& model, const DTBatch& batch,
                     bool collect_attention = false);

// Extra objective added to the MSE term on every training step.
using AuxObjective = std::function<ad::Var(ad::Graph& g, const ParamVars& p, const DTForward& fwd, int64_t step)>;

struct TrainConfig {
  int64_t steps = 5000;
  int64_t batch_size = 64;
  AdamConfig adam;
  double grad_clip = 0.25;
  uint64_t seed = 0;
  int64_t eval_every = 0;  // 0 disables periodic evaluation
  int64_t eval_episodes = 25;
  double target_multiplier = 1.0;
  // Stop at the first periodic evaluation whose normalized score reaches this.
  double stop_at_score = std::numeric_limits<double>::quiet_NaN();
  // Restricts which unfrozen parameters train; null means all "dt." and transformer entries.
  std::function<bool(std::string_view)> trainable;
  AuxObjective aux;
  std::function<void(int64_t step, const DTModel&)> on_step;
};

struct TrainLog {
  std::vector<float> losses;
  std::vector<std::pair<int64_t, double>> eval_scores;  // (step, normalized)
  int64_t steps_run = 0;
};

// Returns the total loss; mse_out, when given, receives the action MSE term alone.
float train_step(DTModel& model, const DTBatch& batch, OptimizerState& opt, const TrainConfig& cfg, int64_t step,
                 float* mse_out = nullptr);
TrainLog train_dt(DTModel& model, const OfflineDataset& ds, const TrainConfig& cfg);

struct EvalResult {
  std::string env;
  std::vector<double> returns;
  double mean_return = 0.0;
  double normalized = 0.0;  // normalized mean
};

// Return-conditioned rollouts, all episodes stepped in lockstep as one batch.
EvalResult evaluate(const DTModel& model, double target_multiplier, int64_t episodes, uint64_t seed);

}  // namespace dtm
