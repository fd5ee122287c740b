#include "dtmerge/dt_policy.hpp"

#include <algorithm>
#include <cmath>

#include "dtmerge/rng.hpp"

namespace dtm {

using ad::Graph;
using ad::Var;

EnvBinding EnvBinding::from_dataset(const OfflineDataset& ds) {
  const EnvSpec& env = env_by_name(ds.env);
  EnvBinding b;
  b.env = env.name;
  b.state_dim = env.state_dim;
  b.action_dim = env.action_dim;
  b.max_timestep = env.horizon;
  b.rtg_scale = std::max(1.0, ds.max_abs_return());
  b.max_return = ds.max_return();
  b.refs = ds.refs;
  return b;
}

bool is_projection_param(std::string_view name) { return name.substr(0, 3) == "dt."; }

ParameterTree init_dt_projections(const ArchConfig& arch, const EnvBinding& env, uint64_t seed) {
  const int64_t d = arch.d_embed;
  ParameterTree tree;
  auto normal = [&](const std::string& name, Shape shape) {
    Rng rng(derive_seed(seed, name));
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.02));
    tree.add(name, std::move(t));
  };
  normal("dt.embed_timestep.weight", {env.max_timestep, d});
  normal("dt.embed_rtg.weight", {1, d});
  tree.add("dt.embed_rtg.bias", Tensor::zeros({d}));
  normal("dt.embed_state.weight", {env.state_dim, d});
  tree.add("dt.embed_state.bias", Tensor::zeros({d}));
  normal("dt.embed_action.weight", {env.action_dim, d});
  tree.add("dt.embed_action.bias", Tensor::zeros({d}));
  tree.add("dt.embed_ln.gamma", Tensor::full({d}, 1.0f));
  tree.add("dt.embed_ln.beta", Tensor::zeros({d}));
  normal("dt.action_head.weight", {d, env.action_dim});
  tree.add("dt.action_head.bias", Tensor::zeros({env.action_dim}));
  return tree;
}

DTModel init_dt_model(const ArchConfig& arch, const EnvBinding& env, uint64_t seed, int64_t context_len) {
  arch.validate();
  if (context_len <= 0 || 3 * context_len > arch.context_positions)
    throw Error("init_dt_model: 3K=" + std::to_string(3 * context_len) + " tokens exceed context of " +
                std::to_string(arch.context_positions));
  DTModel m;
  m.arch = arch;
  m.context_len = context_len;
  m.env = env;
  const ParameterTree proj = init_dt_projections(arch, env, derive_seed(seed, "projections"));
  // Input projections, then the transformer in depth order, then the action head.
  for (const auto& e : proj.entries())
    if (e.name.find("action_head") == std::string::npos) m.params.add(e.name, e.value);
  const ParameterTree transformer = init_transformer(arch, derive_seed(seed, "transformer"));
  for (const auto& e : transformer.entries()) m.params.add(e.name, e.value);
  for (const auto& e : proj.entries())
    if (e.name.find("action_head") != std::string::npos) m.params.add(e.name, e.value);
  return m;
}

ParameterTree transformer_part(const ParameterTree& params) {
  return params.filter([](std::string_view n) { return is_transformer_param(n); });
}

DTBatch::DTBatch(int64_t b, int64_t k, int64_t sd, int64_t ad)
    : batch(b), len(k), state_dim(sd), action_dim(ad),
      rtg(static_cast<size_t>(b * k), 0.0f),
      states(static_cast<size_t>(b * k * sd), 0.0f),
      actions(static_cast<size_t>(b * k * ad), 0.0f),
      timesteps(static_cast<size_t>(b * k), 0),
      mask(static_cast<size_t>(b * k), 0.0f) {}

void tokenize(const Trajectory& tr, std::span<const double> rtg, int64_t start, DTBatch& batch, int64_t row) {
  const int64_t T = tr.length();
  if (start < 0 || start >= T) throw Error("tokenize: start " + std::to_string(start) + " outside trajectory");
  if (static_cast<int64_t>(rtg.size()) != T) throw Error("tokenize: rtg length does not match trajectory");
  const int64_t K = batch.len, sd = batch.state_dim, ad = batch.action_dim;
  const int64_t n = std::min(K, T - start);
  for (int64_t i = 0; i < K; ++i) {
    const size_t pos = static_cast<size_t>(row * K + i);
    if (i >= n) {
      batch.rtg[pos] = 0.0f;
      batch.timesteps[pos] = 0;
      batch.mask[pos] = 0.0f;
      std::fill_n(batch.states.begin() + static_cast<ptrdiff_t>(pos * sd), sd, 0.0f);
      std::fill_n(batch.actions.begin() + static_cast<ptrdiff_t>(pos * ad), ad, 0.0f);
      continue;
    }
    const int64_t t = start + i;
    batch.rtg[pos] = static_cast<float>(rtg[static_cast<size_t>(t)]);
    batch.timesteps[pos] = static_cast<int32_t>(t);
    batch.mask[pos] = 1.0f;
    std::copy_n(tr.states.begin() + t * sd, sd, batch.states.begin() + static_cast<ptrdiff_t>(pos * sd));
    for (int64_t j = 0; j < ad; ++j) {
      const float a = tr.actions[static_cast<size_t>(t * ad + j)];
      if (!(a >= -1.0f && a <= 1.0f)) throw Error("tokenize: action outside [-1, 1]");
      batch.actions[pos * ad + j] = a;
    }
  }
}

std::vector<Token> interleave_tokens(const DTBatch& batch, int64_t row) {
  std::vector<Token> out;
  const int64_t K = batch.len, sd = batch.state_dim, ad = batch.action_dim;
  for (int64_t i = 0; i < K; ++i) {
    const size_t pos = static_cast<size_t>(row * K + i);
    if (batch.mask[pos] == 0.0f) continue;
    const int32_t t = batch.timesteps[pos];
    out.push_back({TokenKind::rtg, t, {batch.rtg[pos]}});
    out.push_back({TokenKind::state, t,
                   std::vector<float>(batch.states.begin() + static_cast<ptrdiff_t>(pos * sd),
                                      batch.states.begin() + static_cast<ptrdiff_t>((pos + 1) * sd))});
    out.push_back({TokenKind::action, t,
                   std::vector<float>(batch.actions.begin() + static_cast<ptrdiff_t>(pos * ad),
                                      batch.actions.begin() + static_cast<ptrdiff_t>((pos + 1) * ad))});
  }
  return out;
}

DTBatch deinterleave_tokens(std::span<const Token> tokens, int64_t len, int64_t state_dim, int64_t action_dim) {
  if (tokens.size() % 3 != 0 || static_cast<int64_t>(tokens.size() / 3) > len)
    throw Error("deinterleave_tokens: token count does not form whole transitions within K");
  DTBatch b(1, len, state_dim, action_dim);
  for (size_t i = 0; i < tokens.size() / 3; ++i) {
    const Token& r = tokens[3 * i];
    const Token& s = tokens[3 * i + 1];
    const Token& a = tokens[3 * i + 2];
    if (r.kind != TokenKind::rtg || s.kind != TokenKind::state || a.kind != TokenKind::action)
      throw Error("deinterleave_tokens: tokens are not in (rtg, state, action) order");
    if (static_cast<int64_t>(s.values.size()) != state_dim || static_cast<int64_t>(a.values.size()) != action_dim)
      throw Error("deinterleave_tokens: token width mismatch");
    b.rtg[i] = r.values.at(0);
    b.timesteps[i] = r.timestep;
    b.mask[i] = 1.0f;
    std::copy(s.values.begin(), s.values.end(), b.states.begin() + static_cast<ptrdiff_t>(i * state_dim));
    std::copy(a.values.begin(), a.values.end(), b.actions.begin() + static_cast<ptrdiff_t>(i * action_dim));
  }
  return b;
}

DTBatch sample_batch(const OfflineDataset& ds, int64_t batch_size, int64_t context_len, uint64_t seed) {
  if (ds.trajectories.empty()) throw Error("sample_batch: empty dataset");
  const EnvSpec& env = env_by_name(ds.env);
  DTBatch batch(batch_size, context_len, env.state_dim, env.action_dim);
  Rng rng(seed);
  for (int64_t row = 0; row < batch_size; ++row) {
    const Trajectory& tr = ds.trajectories[rng.below(ds.trajectories.size())];
    const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(tr.length())));
    const std::vector<double> rtg = compute_rtg(tr.rewards);
    tokenize(tr, rtg, start, batch, row);
  }
  return batch;
}

namespace {

Var linear(Graph& g, const ParamVars& p, const std::string& prefix, Var x) {
  return g.add(g.matmul(x, param(p, prefix + ".weight")), param(p, prefix + ".bias"));
}

}  // namespace

Var dt_embed_tokens(Graph& g, const ParamVars& p, const DTModel& model, const DTBatch& batch) {
  const int64_t B = batch.batch, K = batch.len;
  if (batch.state_dim != model.env.state_dim || batch.action_dim != model.env.action_dim)
    throw Error("dt_forward: batch dims do not match the model's environment " + model.env.env);
  std::vector<float> rtg(batch.rtg.size());
  const float inv_scale = static_cast<float>(1.0 / model.env.rtg_scale);
  for (size_t i = 0; i < rtg.size(); ++i) rtg[i] = batch.rtg[i] * inv_scale;
  Var r = g.input(Tensor({B, K, 1}, std::move(rtg)));
  Var s = g.input(Tensor({B, K, batch.state_dim}, batch.states));
  Var a = g.input(Tensor({B, K, batch.action_dim}, batch.actions));
  Var time = g.embedding(param(p, "dt.embed_timestep.weight"), batch.timesteps, {B, K});
  Var er = g.add(linear(g, p, "dt.embed_rtg", r), time);
  Var es = g.add(linear(g, p, "dt.embed_state", s), time);
  Var ea = g.add(linear(g, p, "dt.embed_action", a), time);
  const std::array<Var, 3> parts{er, es, ea};
  return g.interleave(parts);
}

DTForward dt_forward(Graph& g, const ParamVars& p, const DTModel& model, const DTBatch& batch, bool collect_attention) {
  const int64_t B = batch.batch, K = batch.len, d = model.arch.d_embed;
  if (K > model.context_len) throw Error("dt_forward: window longer than context length K");
  DTForward out;
  out.token_embeddings = dt_embed_tokens(g, p, model, batch);
  Var h = g.layer_norm(out.token_embeddings, param(p, "dt.embed_ln.gamma"), param(p, "dt.embed_ln.beta"));
  h = g.dropout(g.reshape(h, {B * 3 * K, d}), model.arch.dropout);
  h = transformer_forward(g, p, model.arch, h, B, 3 * K, collect_attention ? &out.attention : nullptr);
  Var state_tokens = g.take_strided(g.reshape(h, {B, 3 * K, d}), 1, 3);
  out.actions = g.tanh(linear(g, p, "dt.action_head", state_tokens));
  return out;
}

namespace {

std::function<bool(std::string_view)> resolve_trainable(const TrainConfig& cfg) {
  if (cfg.trainable) return cfg.trainable;
  if (cfg.aux) return nullptr;
  return [](std::string_view n) { return n.substr(0, 8) != "lm_head."; };
}

}  // namespace

float train_step(DTModel& model, const DTBatch& batch, OptimizerState& opt, const TrainConfig& cfg, int64_t step,
                 float* mse_out) {
  const auto active = resolve_trainable(cfg);
  Graph g({.training = true, .dropout_seed = derive_seed(cfg.seed, "dropout"), .step = static_cast<uint64_t>(step)});
  try {
    const ParamVars p = bind_parameters(g, model.params, active);
    const DTForward f = dt_forward(g, p, model, batch);
    Var target = g.input(Tensor({batch.batch, batch.len, batch.action_dim}, batch.actions));
    Var loss = g.mse_loss(f.actions, target, batch.mask);
    if (mse_out) *mse_out = g.value(loss).item();
    if (cfg.aux) loss = g.add(loss, cfg.aux(g, p, f, step));
    const float value = g.value(loss).item();
    ad::GradientMap grads = g.backward(loss);
    clip_grad_norm(grads, cfg.grad_clip);
    optimizer_step(model.params, grads, opt, active);
    return value;
  } catch (const NonFiniteError& e) {
    throw NonFiniteError("training diverged at step " + std::to_string(step) + " (" + model.env.env + "): " + e.what());
  }
}

TrainLog train_dt(DTModel& model, const OfflineDataset& ds, const TrainConfig& cfg) {
  if (ds.env != model.env.env) throw Error("train_dt: dataset env " + ds.env + " does not match model env " + model.env.env);
  OptimizerState opt;
  opt.config = cfg.adam;
  TrainLog log;
  const uint64_t data_seed = derive_seed(cfg.seed, "batches");
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    const DTBatch batch = sample_batch(ds, cfg.batch_size, model.context_len, derive_seed(data_seed, static_cast<uint64_t>(step)));
    log.losses.push_back(train_step(model, batch, opt, cfg, step));
    log.steps_run = step;
    if (cfg.on_step) cfg.on_step(step, model);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      const EvalResult r = evaluate(model, cfg.target_multiplier, cfg.eval_episodes, derive_seed(cfg.seed, "eval"));
      log.eval_scores.emplace_back(step, r.normalized);
      if (!std::isnan(cfg.stop_at_score) && r.normalized >= cfg.stop_at_score) break;
    }
  }
  return log;
}

EvalResult evaluate(const DTModel& model, double target_multiplier, int64_t episodes, uint64_t seed) {
  if (episodes <= 0) throw Error("evaluate: episodes must be positive");
  const EnvSpec& env = env_by_name(model.env.env);
  if (env.state_dim != model.env.state_dim || env.action_dim != model.env.action_dim)
    throw Error("evaluate: model is not bound to " + env.name);
  const int64_t E = episodes, K = model.context_len, sd = env.state_dim, ad = env.action_dim;
  const uint64_t eval_stream = derive_seed(seed, "eval-episodes");

  std::vector<std::vector<float>> state(static_cast<size_t>(E));
  for (int64_t e = 0; e < E; ++e) state[static_cast<size_t>(e)] = reset(env, derive_seed(eval_stream, static_cast<uint64_t>(e)));
  // Per-episode history of (rtg, state, action) over the whole episode.
  std::vector<std::vector<float>> hist_rtg(E), hist_s(E), hist_a(E);
  std::vector<double> remaining(static_cast<size_t>(E), target_multiplier * model.env.max_return);
  std::vector<double> returns(static_cast<size_t>(E), 0.0);

  for (int64_t t = 0; t < env.horizon; ++t) {
    const int64_t n = std::min(K, t + 1);
    const int64_t first = t + 1 - n;
    DTBatch batch(E, n, sd, ad);
    for (int64_t e = 0; e < E; ++e) {
      auto& hr = hist_rtg[e];
      auto& hs = hist_s[e];
      auto& ha = hist_a[e];
      hr.push_back(static_cast<float>(remaining[static_cast<size_t>(e)]));
      hs.insert(hs.end(), state[e].begin(), state[e].end());
      ha.insert(ha.end(), static_cast<size_t>(ad), 0.0f);
      for (int64_t i = 0; i < n; ++i) {
        const int64_t src = first + i;
        const size_t pos = static_cast<size_t>(e * n + i);
        batch.rtg[pos] = hr[static_cast<size_t>(src)];
        batch.timesteps[pos] = static_cast<int32_t>(src);
        batch.mask[pos] = 1.0f;
        std::copy_n(hs.begin() + src * sd, sd, batch.states.begin() + static_cast<ptrdiff_t>(pos * sd));
        std::copy_n(ha.begin() + src * ad, ad, batch.actions.begin() + static_cast<ptrdiff_t>(pos * ad));
      }
    }
    Graph g;
    const ParamVars p = bind_parameters(g, model.params, [](std::string_view) { return false; });
    const DTForward f = dt_forward(g, p, model, batch);
    const Tensor& act = g.value(f.actions);
    for (int64_t e = 0; e < E; ++e) {
      std::vector<float> a(static_cast<size_t>(ad));
      for (int64_t j = 0; j < ad; ++j) a[static_cast<size_t>(j)] = act[(e * n + (n - 1)) * ad + j];
      StepResult r = step(env, state[e], a);
      std::copy(a.begin(), a.end(), hist_a[e].end() - ad);
      remaining[static_cast<size_t>(e)] -= r.reward;
      returns[static_cast<size_t>(e)] += r.reward;
      state[e] = std::move(r.next_state);
    }
  }
  EvalResult out;
  out.env = env.name;
  out.returns = returns;
  double total = 0.0;
  for (double r : returns) total += r;
  out.mean_return = total / static_cast<double>(E);
  out.normalized = normalize_score(model.env.refs, out.mean_return);
  return out;
}

}  // namespace dtm
