#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dtmerge/checkpoint.hpp"
#include "dtmerge/dt_policy.hpp"
#include "dtmerge/env.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

struct FreezeAudit {
  int64_t task = 0;
  int64_t step = 0;
  std::string hash;
};

// Result of merge-freeze-finetune: one full model per task whose selected entries are
// the shared, frozen average.
struct MultiTaskBundle {
  std::string selector;
  double coefficient = 0.0;
  int64_t finetune_steps = 0;
  ParameterTree shared;
  std::string shared_hash;
  std::vector<DTModel> tasks;
  std::vector<FreezeAudit> audits;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
};

struct MFFConfig {
  int64_t finetune_steps = 2000;
  int64_t audit_every = 500;
  TrainConfig train;  // optimizer settings and seed; `steps` is ignored
};

// Equal-weight (1/m) average of every selected entry across the models.
ParameterTree average_selection(const std::vector<DTModel>& models, const LayerSelector& selector);

// Merges the selection, freezes it and finetunes each task's remaining parameters on its
// own dataset. Throws if a freeze audit ever sees the shared bytes change. An empty
// selection returns the inputs untouched.
MultiTaskBundle merge_freeze_finetune(const std::vector<DTModel>& models,
                                      const std::vector<const OfflineDataset*>& datasets,
                                      const LayerSelector& selector, const MFFConfig& cfg);

// One checkpoint for the shared tree, one per task holding the remaining entries, and
// manifest.json tying them together with content hashes.
void save_bundle(const MultiTaskBundle& bundle, const std::filesystem::path& dir);
MultiTaskBundle load_bundle(const std::filesystem::path& dir);

// Source transformer copied in and frozen; only the target's projections and heads
// train. `target_init` supplies starting projections (fresh ones when null).
DTModel frozen_transfer(const DTModel& source, const OfflineDataset& target, const DTModel* target_init,
                        int64_t finetune_steps, const TrainConfig& train);

struct SizeReport {
  std::string selector;
  int64_t n_tasks = 0;
  int64_t total = 0;   // transformer parameters per model
  int64_t shared = 0;  // selected
  int64_t unique = 0;  // total - shared
  double f_shared = 0.0;
  double f_unique = 0.0;
  double percent = 0.0;  // 100 * (f_s + m * f_u)
};

SizeReport transformer_size_ratio(const LayerSelector& selector, const ArchConfig& arch, int64_t n_tasks);

struct CurvePoint {
  int64_t epoch = 0;
  int64_t step = 0;
  double mean_return = 0.0;
  double normalized = 0.0;
};

// Trains a fresh model for `target` whose selected transformer entries are copied from
// `init` (no copy when init is null: the random-init control), evaluating before training
// and after each epoch.
std::vector<CurvePoint> init_transfer(const ParameterTree* init, const LayerSelector& copy, const ArchConfig& arch,
                                      const OfflineDataset& target, int64_t epochs, int64_t steps_per_epoch,
                                      const TrainConfig& train, uint64_t init_seed);

}  // namespace dtm
