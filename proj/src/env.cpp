#include "dtmerge/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dtmerge/io.hpp"
#include "dtmerge/rng.hpp"

namespace dtm {

namespace {

const std::vector<EnvSpec>& registry() {
  static const std::vector<EnvSpec> envs = {
      {EnvId::point_mass, "PointMass2D", 4, 2, 100},
      {EnvId::swing, "Swing", 3, 1, 200},
      {EnvId::arm2, "Arm2", 6, 2, 150},
  };
  return envs;
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// PointMass2D: damped double integrator in the plane, goal at the origin.
constexpr double kPmDt = 0.1, kPmGain = 2.0, kPmDrag = 0.5, kPmLimit = 3.0;
// Swing: torque-limited pendulum around the upright, state (cos, sin, omega).
constexpr double kSwDt = 0.05, kSwGravity = 2.0, kSwTorque = 3.0, kSwDamping = 0.2, kSwMaxSpeed = 8.0;
// Arm2: planar two-link arm tracking a goal posture given in joint space.
constexpr double kArmDt = 0.05, kArmGain = 3.0, kArmDamping = 1.0, kArmL1 = 1.0, kArmL2 = 0.8, kArmMaxSpeed = 5.0;

std::pair<double, double> arm_tip(double q1, double q2) {
  return {kArmL1 * std::cos(q1) + kArmL2 * std::cos(q1 + q2), kArmL1 * std::sin(q1) + kArmL2 * std::sin(q1 + q2)};
}

}  // namespace

const EnvSpec& env_spec(EnvId id) { return registry()[static_cast<size_t>(id)]; }

const EnvSpec& env_by_name(std::string_view name) {
  for (const EnvSpec& e : registry())
    if (e.name == name) return e;
  throw Error("unknown environment '" + std::string(name) + "'");
}

std::vector<EnvId> all_envs() { return {EnvId::point_mass, EnvId::swing, EnvId::arm2}; }

std::vector<float> clip_action(std::span<const float> action) {
  std::vector<float> out(action.begin(), action.end());
  for (float& a : out) a = std::min(1.0f, std::max(-1.0f, a));
  return out;
}

std::vector<float> reset(const EnvSpec& env, uint64_t seed) {
  Rng rng(derive_seed(seed, "reset"));
  switch (env.id) {
    case EnvId::point_mass: {
      const double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0);
      return {static_cast<float>(x), static_cast<float>(y), 0.0f, 0.0f};
    }
    case EnvId::swing: {
      const double theta = rng.uniform(-2.5, 2.5);
      return {static_cast<float>(std::cos(theta)), static_cast<float>(std::sin(theta)), 0.0f};
    }
    case EnvId::arm2: {
      const double q1 = rng.uniform(-1.0, 1.0), q2 = rng.uniform(-1.0, 1.0);
      const double g1 = rng.uniform(-1.5, 1.5), g2 = rng.uniform(-1.5, 1.5);
      return {static_cast<float>(q1), static_cast<float>(q2), 0.0f, 0.0f, static_cast<float>(g1), static_cast<float>(g2)};
    }
  }
  throw Error("reset: unknown environment");
}

StepResult step(const EnvSpec& env, std::span<const float> state, std::span<const float> action) {
  if (static_cast<int64_t>(state.size()) != env.state_dim)
    throw ShapeError(env.name + " step: state has " + std::to_string(state.size()) + " dims, expected " +
                     std::to_string(env.state_dim));
  if (static_cast<int64_t>(action.size()) != env.action_dim)
    throw ShapeError(env.name + " step: action has " + std::to_string(action.size()) + " dims, expected " +
                     std::to_string(env.action_dim));
  const std::vector<float> a = clip_action(action);
  StepResult r;
  switch (env.id) {
    case EnvId::point_mass: {
      double px = state[0], py = state[1], vx = state[2], vy = state[3];
      vx = clampd(vx + kPmDt * (kPmGain * a[0] - kPmDrag * vx), -kPmLimit, kPmLimit);
      vy = clampd(vy + kPmDt * (kPmGain * a[1] - kPmDrag * vy), -kPmLimit, kPmLimit);
      px = clampd(px + kPmDt * vx, -kPmLimit, kPmLimit);
      py = clampd(py + kPmDt * vy, -kPmLimit, kPmLimit);
      r.next_state = {static_cast<float>(px), static_cast<float>(py), static_cast<float>(vx), static_cast<float>(vy)};
      r.reward = static_cast<float>(-std::sqrt(px * px + py * py));
      break;
    }
    case EnvId::swing: {
      double theta = std::atan2(static_cast<double>(state[1]), static_cast<double>(state[0]));
      double omega = state[2];
      omega += kSwDt * (kSwGravity * std::sin(theta) + kSwTorque * a[0] - kSwDamping * omega);
      omega = clampd(omega, -kSwMaxSpeed, kSwMaxSpeed);
      theta += kSwDt * omega;
      r.next_state = {static_cast<float>(std::cos(theta)), static_cast<float>(std::sin(theta)), static_cast<float>(omega)};
      r.reward = static_cast<float>(-((1.0 - std::cos(theta)) + 0.01 * omega * omega));
      break;
    }
    case EnvId::arm2: {
      double q1 = state[0], q2 = state[1], d1 = state[2], d2 = state[3];
      const double g1 = state[4], g2 = state[5];
      d1 = clampd(d1 + kArmDt * (kArmGain * a[0] - kArmDamping * d1), -kArmMaxSpeed, kArmMaxSpeed);
      d2 = clampd(d2 + kArmDt * (kArmGain * a[1] - kArmDamping * d2), -kArmMaxSpeed, kArmMaxSpeed);
      q1 = clampd(q1 + kArmDt * d1, -std::numbers::pi, std::numbers::pi);
      q2 = clampd(q2 + kArmDt * d2, -std::numbers::pi, std::numbers::pi);
      const auto [tx, ty] = arm_tip(q1, q2);
      const auto [gx, gy] = arm_tip(g1, g2);
      r.next_state = {static_cast<float>(q1), static_cast<float>(q2), static_cast<float>(d1),
                      static_cast<float>(d2), state[4],               state[5]};
      r.reward = static_cast<float>(-std::hypot(tx - gx, ty - gy));
      break;
    }
  }
  return r;
}

std::vector<float> expert_action(const EnvSpec& env, std::span<const float> s) {
  switch (env.id) {
    case EnvId::point_mass:
      return clip_action(std::vector<float>{static_cast<float>(-2.0 * s[0] - 1.5 * s[2]),
                                            static_cast<float>(-2.0 * s[1] - 1.5 * s[3])});
    case EnvId::swing: {
      const double theta = std::atan2(static_cast<double>(s[1]), static_cast<double>(s[0]));
      return clip_action(std::vector<float>{static_cast<float>(-(2.0 * theta + 0.8 * s[2]))});
    }
    case EnvId::arm2:
      return clip_action(std::vector<float>{static_cast<float>(2.0 * (s[4] - s[0]) - 1.2 * s[2]),
                                            static_cast<float>(2.0 * (s[5] - s[1]) - 1.2 * s[3])});
  }
  throw Error("expert_action: unknown environment");
}

std::string_view to_string(PolicyQuality q) {
  switch (q) {
    case PolicyQuality::random: return "random";
    case PolicyQuality::medium: return "medium";
    case PolicyQuality::expert: return "expert";
  }
  return "?";
}

PolicyQuality quality_from_string(std::string_view s) {
  if (s == "random") return PolicyQuality::random;
  if (s == "medium") return PolicyQuality::medium;
  if (s == "expert") return PolicyQuality::expert;
  throw Error("unknown policy quality '" + std::string(s) + "'");
}

ScriptedPolicy::ScriptedPolicy(const EnvSpec& env, PolicyQuality quality, uint64_t noise_seed)
    : env_(&env), quality_(quality), noise_seed_(noise_seed) {}

std::vector<float> ScriptedPolicy::act(std::span<const float> state) {
  Rng rng(derive_seed(noise_seed_, calls_++));
  std::vector<float> a;
  const bool random_step =
      quality_ == PolicyQuality::random || (quality_ == PolicyQuality::medium && rng.uniform() < kMediumRandomFraction);
  if (random_step) {
    a.resize(static_cast<size_t>(env_->action_dim));
    for (float& v : a) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return a;
  }
  a = expert_action(*env_, state);
  if (quality_ == PolicyQuality::medium) {
    for (float& v : a) v = static_cast<float>(v + rng.normal(0.0, kMediumNoise));
    a = clip_action(a);
  }
  return a;
}

std::vector<double> compute_rtg(std::span<const float> rewards) {
  if (rewards.empty()) throw Error("compute_rtg: empty reward sequence");
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    if (!std::isfinite(rewards[i])) throw NonFiniteError("compute_rtg: non-finite reward");
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

Trajectory rollout(const EnvSpec& env, ScriptedPolicy& policy, uint64_t reset_seed) {
  Trajectory tr;
  std::vector<float> s = reset(env, reset_seed);
  for (int64_t t = 0; t < env.horizon; ++t) {
    std::vector<float> a = clip_action(policy.act(s));
    StepResult r = step(env, s, a);
    tr.states.insert(tr.states.end(), s.begin(), s.end());
    tr.actions.insert(tr.actions.end(), a.begin(), a.end());
    tr.rewards.push_back(r.reward);
    s = std::move(r.next_state);
  }
  tr.total_return = compute_rtg(tr.rewards)[0];
  return tr;
}

namespace {

double mean_return(const EnvSpec& env, PolicyQuality q, uint64_t seed, int64_t episodes) {
  double total = 0.0;
  const uint64_t stream = derive_seed(seed, to_string(q));
  for (int64_t i = 0; i < episodes; ++i) {
    const uint64_t ep = derive_seed(stream, static_cast<uint64_t>(i));
    ScriptedPolicy policy(env, q, derive_seed(ep, "policy"));
    total += rollout(env, policy, ep).total_return;
  }
  return total / static_cast<double>(episodes);
}

}  // namespace

ReferenceReturns reference_returns(const EnvSpec& env, uint64_t seed, int64_t episodes) {
  const uint64_t ref_seed = derive_seed(seed, "reference");
  ReferenceReturns refs;
  refs.random_ref = mean_return(env, PolicyQuality::random, ref_seed, episodes);
  refs.medium_ref = mean_return(env, PolicyQuality::medium, ref_seed, episodes);
  refs.expert_ref = mean_return(env, PolicyQuality::expert, ref_seed, episodes);
  if (!(refs.random_ref < refs.medium_ref && refs.medium_ref < refs.expert_ref))
    throw Error(env.name + ": scripted policy returns are not ordered random < medium < expert");
  return refs;
}

double normalize_score(const ReferenceReturns& refs, double raw_return) {
  const double span = refs.expert_ref - refs.random_ref;
  if (span == 0.0) throw Error("normalize_score: degenerate references (expert_ref == random_ref)");
  return 100.0 * (raw_return - refs.random_ref) / span;
}

std::string_view to_string(DatasetQuality q) {
  switch (q) {
    case DatasetQuality::medium: return "medium";
    case DatasetQuality::expert: return "expert";
    case DatasetQuality::medium_expert: return "medium-expert";
  }
  return "?";
}

DatasetQuality dataset_quality_from_string(std::string_view s) {
  if (s == "medium") return DatasetQuality::medium;
  if (s == "expert") return DatasetQuality::expert;
  if (s == "medium-expert" || s == "medium_expert") return DatasetQuality::medium_expert;
  throw Error("unknown dataset quality '" + std::string(s) + "'");
}

double OfflineDataset::max_return() const {
  if (trajectories.empty()) throw Error("dataset has no trajectories");
  double m = trajectories.front().total_return;
  for (const Trajectory& t : trajectories) m = std::max(m, t.total_return);
  return m;
}

double OfflineDataset::max_abs_return() const {
  double m = 0.0;
  for (const Trajectory& t : trajectories) m = std::max(m, std::abs(t.total_return));
  return m;
}

OfflineDataset generate_dataset(const EnvSpec& env, DatasetQuality quality, int64_t n_trajectories, uint64_t seed) {
  if (n_trajectories <= 0) throw Error("generate_dataset: n_trajectories must be positive");
  OfflineDataset ds;
  ds.env = env.name;
  ds.quality = quality;
  ds.seed = seed;
  ds.refs = reference_returns(env, seed);
  auto tier = [&](PolicyQuality q) {
    const uint64_t stream = derive_seed(derive_seed(seed, "data"), to_string(q));
    for (int64_t i = 0; i < n_trajectories; ++i) {
      const uint64_t ep = derive_seed(stream, static_cast<uint64_t>(i));
      ScriptedPolicy policy(env, q, derive_seed(ep, "policy"));
      ds.trajectories.push_back(rollout(env, policy, ep));
    }
  };
  if (quality != DatasetQuality::expert) tier(PolicyQuality::medium);
  if (quality != DatasetQuality::medium) tier(PolicyQuality::expert);
  return ds;
}

// ---------------------------------------------------------------------------
// DTDS files

void save_dataset(const OfflineDataset& ds, const std::filesystem::path& path) {
  const EnvSpec& env = env_by_name(ds.env);
  nlohmann::ordered_json h;
  h["env"] = ds.env;
  h["quality"] = std::string(to_string(ds.quality));
  h["state_dim"] = env.state_dim;
  h["action_dim"] = env.action_dim;
  h["n_trajectories"] = ds.trajectories.size();
  std::vector<int64_t> lengths;
  for (const Trajectory& t : ds.trajectories) lengths.push_back(t.length());
  h["lengths"] = lengths;
  h["references"] = {{"random", ds.refs.random_ref}, {"medium", ds.refs.medium_ref}, {"expert", ds.refs.expert_ref}};
  h["seed"] = ds.seed;
  h["layout"] = {"states", "actions", "rewards"};
  std::string payload;
  for (const Trajectory& t : ds.trajectories) {
    append_f32_le(payload, t.states);
    append_f32_le(payload, t.actions);
    append_f32_le(payload, t.rewards);
  }
  atomic_write(path, encode_container("DTDS", kDatasetVersion, h, payload));
}

OfflineDataset load_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Container c = decode_container(bytes, "DTDS", kDatasetVersion);
  OfflineDataset ds;
  try {
    const auto& h = c.header;
    ds.env = h.at("env").get<std::string>();
    ds.quality = dataset_quality_from_string(h.at("quality").get<std::string>());
    ds.seed = h.at("seed").get<uint64_t>();
    ds.refs.random_ref = h.at("references").at("random").get<double>();
    ds.refs.medium_ref = h.at("references").at("medium").get<double>();
    ds.refs.expert_ref = h.at("references").at("expert").get<double>();
    const EnvSpec& env = env_by_name(ds.env);
    if (h.at("state_dim").get<int64_t>() != env.state_dim || h.at("action_dim").get<int64_t>() != env.action_dim)
      throw FormatError("dataset dims do not match environment " + env.name);
    const auto lengths = h.at("lengths").get<std::vector<int64_t>>();
    if (static_cast<int64_t>(lengths.size()) != h.at("n_trajectories").get<int64_t>())
      throw FormatError("dataset header: lengths/n_trajectories disagree");
    size_t offset = 0;
    for (int64_t len : lengths) {
      Trajectory t;
      t.states.resize(static_cast<size_t>(len * env.state_dim));
      t.actions.resize(static_cast<size_t>(len * env.action_dim));
      t.rewards.resize(static_cast<size_t>(len));
      for (std::vector<float>* part : {&t.states, &t.actions, &t.rewards}) {
        read_f32_le(c.payload, offset, *part);
        offset += part->size() * sizeof(float);
      }
      t.total_return = compute_rtg(t.rewards)[0];
      ds.trajectories.push_back(std::move(t));
    }
    if (offset != c.payload.size()) throw FormatError("dataset payload has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  return ds;
}

}  // namespace dtm
