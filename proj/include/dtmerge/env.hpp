#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dtmerge/tensor.hpp"

namespace dtm {

enum class EnvId { point_mass, swing, arm2 };

// Static description of a toy control task. Dynamics are deterministic and pure:
// the full state travels with the caller, so environments are plain values.
struct EnvSpec {
  EnvId id;
  std::string name;
  int64_t state_dim;
  int64_t action_dim;
  int64_t horizon;
};

const EnvSpec& env_spec(EnvId id);
const EnvSpec& env_by_name(std::string_view name);
std::vector<EnvId> all_envs();

struct StepResult {
  std::vector<float> next_state;
  float reward;
};

std::vector<float> reset(const EnvSpec& env, uint64_t seed);
// Actions are clipped to [-1, 1] before use.
StepResult step(const EnvSpec& env, std::span<const float> state, std::span<const float> action);
std::vector<float> clip_action(std::span<const float> action);

enum class PolicyQuality { random, medium, expert };
std::string_view to_string(PolicyQuality q);
PolicyQuality quality_from_string(std::string_view s);

// Scripted behaviour policy with its own noise stream.
class ScriptedPolicy {
 public:
  ScriptedPolicy(const EnvSpec& env, PolicyQuality quality, uint64_t noise_seed);
  std::vector<float> act(std::span<const float> state);

  static constexpr double kMediumNoise = 0.3;
  static constexpr double kMediumRandomFraction = 0.2;

 private:
  const EnvSpec* env_;
  PolicyQuality quality_;
  uint64_t noise_seed_;
  uint64_t calls_ = 0;
};

// Noise-free expert controller.
std::vector<float> expert_action(const EnvSpec& env, std::span<const float> state);

struct Trajectory {
  std::vector<float> states;   // [T x state_dim]
  std::vector<float> actions;  // [T x action_dim]
  std::vector<float> rewards;  // [T]
  double total_return = 0.0;   // equals compute_rtg(rewards)[0]

  int64_t length() const { return static_cast<int64_t>(rewards.size()); }
};

Trajectory rollout(const EnvSpec& env, ScriptedPolicy& policy, uint64_t reset_seed);

struct ReferenceReturns {
  double random_ref = 0.0;
  double medium_ref = 0.0;
  double expert_ref = 0.0;
};

// Monte Carlo means over `episodes` rollouts per quality; throws unless random < medium < expert.
ReferenceReturns reference_returns(const EnvSpec& env, uint64_t seed, int64_t episodes = 100);

enum class DatasetQuality { medium, expert, medium_expert };
std::string_view to_string(DatasetQuality q);
DatasetQuality dataset_quality_from_string(std::string_view s);

struct OfflineDataset {
  std::string env;
  DatasetQuality quality = DatasetQuality::expert;
  uint64_t seed = 0;
  ReferenceReturns refs;
  std::vector<Trajectory> trajectories;

  double max_return() const;
  double max_abs_return() const;
};

OfflineDataset generate_dataset(const EnvSpec& env, DatasetQuality quality, int64_t n_trajectories, uint64_t seed);

// 100 * (raw - random_ref) / (expert_ref - random_ref)
double normalize_score(const ReferenceReturns& refs, double raw_return);

// Undiscounted suffix sums accumulated in double from the end.
std::vector<double> compute_rtg(std::span<const float> rewards);

// DTDS container: "DTDS", u16 version, u32 header length, JSON header, f32 payload.
inline constexpr uint16_t kDatasetVersion = 1;
void save_dataset(const OfflineDataset& ds, const std::filesystem::path& path);
OfflineDataset load_dataset(const std::filesystem::path& path);

}  // namespace dtm
