#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtmerge/dt_policy.hpp"
#include "dtmerge/env.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string experiment;
  std::string env;
  std::string coordinate;  // layer, selector, mode or curve point
  double p_or_lambda = 0.0;
  double raw_return = 0.0;
  double normalized = 0.0;
  double pct_of_original = 0.0;
  uint64_t seed = 0;
  std::string status = "ok";  // "failed: ..." for cells that threw
};

struct EvalReport {
  std::string run_id;
  std::string experiment;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<ReportRow> rows;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
  bool failed() const;
};

inline constexpr const char* kReportCsvHeader =
    "experiment,env,layer/coordinate,p_or_lambda,raw_return,normalized,pct_of_original,seed";

std::string report_csv(const EvalReport& report);
nlohmann::ordered_json report_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::ordered_json& j);

// Writes <dir>/<run_id>.json and <dir>/<run_id>.csv. A run id is written once: an
// existing report for it is an error.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Experiment grid

enum class Experiment { single_layer, incremental, attention_sweep, mff, perturb, lm_merge, init_transfer };
std::string_view to_string(Experiment e);
Experiment experiment_from_string(std::string_view s);

struct GridConfig {
  Experiment experiment = Experiment::single_layer;
  std::string run_id = "run";
  std::vector<std::filesystem::path> checkpoints;  // trained models
  std::vector<std::filesystem::path> datasets;     // per model, for finetuning experiments
  std::vector<double> coefficients;                // p or lambda grid; defaults per experiment
  std::vector<std::string> selectors;              // mff / lm_merge / init_transfer
  std::vector<std::string> perturb_modes;          // perturb
  int64_t episodes = 25;
  double target_multiplier = 1.0;
  int64_t finetune_steps = 2000;
  int64_t epochs = 5;             // init_transfer
  int64_t steps_per_epoch = 200;  // init_transfer
  uint64_t seed = 0;

  static GridConfig from_json(const nlohmann::ordered_json& j);
  nlohmann::ordered_json to_json() const;
};

// Runs every cell (in parallel up to DTMERGE_THREADS) and assembles rows in cell order.
// Failed cells leave rows marked with their error instead of aborting the grid.
EvalReport run_grid(const GridConfig& cfg);

// Cells of run_grid are evaluated with this seed, so in-process callers can reproduce them.
uint64_t grid_eval_seed(uint64_t seed);
int64_t worker_threads();

// ---------------------------------------------------------------------------
// Attention maps

struct AttentionMaps {
  int64_t tokens = 0;                // n
  int64_t windows = 0;
  std::vector<std::vector<double>> maps;  // per layer, row-major [n x n]
};

// Attention weights averaged (over heads and sliding windows of n tokens, moved `stride`
// tokens at a time) along the trajectory's (R, s, a) token stream.
AttentionMaps attention_maps(const DTModel& model, const Trajectory& trajectory, int64_t tokens, int64_t stride = 3);
// Lines "layer,row,c0,...,c{n-1}", one per matrix row.
std::string attention_maps_csv(const AttentionMaps& maps);
double frobenius_distance(const AttentionMaps& a, const AttentionMaps& b);

}  // namespace dtm
