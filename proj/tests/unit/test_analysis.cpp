#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dtmerge/analysis.hpp"
#include "dtmerge/checkpoint.hpp"
#include "dtmerge/io.hpp"
#include "dtmerge/lm.hpp"
#include "dtmerge/merge.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace dtm;

namespace {

// Two small trained-looking models plus their datasets, written to disk for the grid.
struct GridInputs {
  std::filesystem::path dir;
  std::vector<OfflineDataset> data;
  std::vector<DTModel> models;
  std::vector<std::filesystem::path> ckpts, dsets;

  explicit GridInputs(const std::string& name, bool shared_lm = false) : dir(fixture::temp_dir(name)) {
    ArchConfig arch = fixture::tiny_arch();
    arch.context_positions = 60;
    data = {fixture::tiny_dataset(EnvId::point_mass, 1, 3), fixture::tiny_dataset(EnvId::swing, 2, 3)};
    const ParameterTree pre = init_transformer(arch, 50);
    for (size_t i = 0; i < data.size(); ++i) {
      DTModel m = init_dt_model(arch, EnvBinding::from_dataset(data[i]), 60 + i, fixture::kTinyK);
      m.params.update_from(oracle::jitter(pre, 70 + i, 0.1));
      const auto c = dir / ("m" + std::to_string(i) + ".dtmc");
      const auto d = dir / ("d" + std::to_string(i) + ".dtds");
      nlohmann::ordered_json prov = {{"kind", "test"}};
      if (shared_lm) prov["lm_init_hash"] = pre.content_hash();
      save_model(m, c, prov);
      save_dataset(data[i], d);
      models.push_back(std::move(m));
      ckpts.push_back(c);
      dsets.push_back(d);
    }
  }

  GridConfig config(Experiment e, const std::string& run_id) const {
    GridConfig g;
    g.experiment = e;
    g.run_id = run_id;
    g.checkpoints = ckpts;
    g.datasets = dsets;
    g.episodes = 2;
    g.finetune_steps = 4;
    g.epochs = 1;
    g.steps_per_epoch = 2;
    g.seed = 9;
    return g;
  }
};

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Report, CsvHasTheContractColumns) {
  EvalReport r;
  r.run_id = "x";
  r.experiment = "single_layer";
  r.rows.push_back({"single_layer", "Swing", "block0.attn", 0.5, -12.5, 88.25, 97.5, 3, "ok"});
  ReportRow bad;
  bad.experiment = "single_layer";
  bad.coordinate = "block1.mlp";
  bad.status = "failed: boom";
  bad.raw_return = bad.normalized = bad.pct_of_original = std::nan("");
  r.rows.push_back(bad);
  const auto rows = parse_csv(report_csv(r));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"experiment", "env", "layer/coordinate", "p_or_lambda", "raw_return",
                                               "normalized", "pct_of_original", "seed"}));
  EXPECT_EQ(rows[1][2], "block0.attn");
  EXPECT_EQ(std::stod(rows[1][5]), 88.25);
  EXPECT_EQ(rows[2][2], "FAILED:block1.mlp");
  EXPECT_TRUE(r.failed());
  const EvalReport back = report_from_json(report_json(r));
  EXPECT_EQ(report_csv(back), report_csv(r));
}

TEST(Report, RunIdsAreAppendOnly) {
  const auto dir = fixture::temp_dir("report_append");
  EvalReport r;
  r.run_id = "once";
  r.experiment = "perturb";
  write_report(r, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "once.csv"));
  EXPECT_THROW(write_report(r, dir), Error);
  r.run_id = "twice";
  EXPECT_NO_THROW(write_report(r, dir));
}

TEST(Grid, ConfigRoundTrips) {
  GridInputs in("grid_cfg");
  GridConfig c = in.config(Experiment::mff, "r1");
  c.selectors = {"attention", "attention+mlp"};
  const GridConfig back = GridConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(GridConfig::from_json(nlohmann::ordered_json{{"experiment", "nope"}}), Error);
}

TEST(Grid, SingleLayerAtZeroIsTheBaseline) {
  GridInputs in("grid_single");
  GridConfig c = in.config(Experiment::single_layer, "s0");
  c.coefficients = {0.0};
  const EvalReport r = run_grid(c);
  EXPECT_FALSE(r.failed());
  // 2 originals, then per unit: two directions and a mean.
  ASSERT_EQ(r.rows.size(), 2 + 3 * layer_units(in.models[0].arch).size());
  for (const auto& row : r.rows) {
    if (row.coordinate == "original") continue;
    EXPECT_DOUBLE_EQ(row.pct_of_original, 100.0) << row.env << " " << row.coordinate;
  }
}

TEST(Grid, SingleLayerRowsMatchInProcessMerge) {
  GridInputs in("grid_single_p");
  GridConfig c = in.config(Experiment::single_layer, "s1");
  c.coefficients = {1.0};
  const EvalReport r = run_grid(c);
  const auto merged = merge_layer(in.models[0].params, in.models[1].params, LayerSelector::unit("block1.attn"), 1.0);
  DTModel m = in.models[0];
  m.params = merged;
  const EvalResult e = evaluate(m, 1.0, 2, grid_eval_seed(9));
  bool found = false;
  for (const auto& row : r.rows)
    if (row.coordinate == "block1.attn" && row.env == in.models[0].env.env) {
      EXPECT_EQ(row.raw_return, e.mean_return);
      found = true;
    }
  EXPECT_TRUE(found);
}

TEST(Grid, AttentionSweepShape) {
  GridInputs in("grid_sweep");
  const EvalReport r = run_grid(in.config(Experiment::attention_sweep, "sw"));
  EXPECT_FALSE(r.failed());
  int sweep = 0;
  for (const auto& row : r.rows) sweep += row.coordinate == "attention";
  EXPECT_EQ(sweep, 2 * 5);
}

TEST(Grid, IncrementalAndPerturbRun) {
  GridInputs in("grid_incr");
  const EvalReport inc = run_grid(in.config(Experiment::incremental, "inc"));
  EXPECT_FALSE(inc.failed());
  GridConfig pc = in.config(Experiment::perturb, "pt");
  const EvalReport pert = run_grid(pc);
  EXPECT_FALSE(pert.failed());
  int rows = 0;
  for (const auto& row : pert.rows) rows += row.coordinate != "original";
  EXPECT_EQ(rows, 2 * 3);
}

TEST(Grid, MffAndLmMergeRun) {
  GridInputs in("grid_mff", true);
  const EvalReport r = run_grid(in.config(Experiment::lm_merge, "lm"));
  EXPECT_FALSE(r.failed());
  ASSERT_TRUE(r.extra.contains("mff:attention"));
  EXPECT_TRUE(r.extra["mff:attention"]["freeze_audits_ok"].get<bool>());
  GridInputs plain("grid_mff_plain");
  EXPECT_THROW(run_grid(plain.config(Experiment::lm_merge, "lm")), Error);
}

TEST(Grid, InitTransferCurves) {
  GridInputs in("grid_init");
  GridConfig c = in.config(Experiment::init_transfer, "it");
  const EvalReport r = run_grid(c);
  for (const auto& row : r.rows) EXPECT_EQ(row.status, "ok") << row.coordinate;
  int random_rows = 0;
  for (const auto& row : r.rows) random_rows += row.coordinate.rfind("random:", 0) == 0;
  EXPECT_EQ(random_rows, 2);
}

TEST(Grid, UnknownModesAreRejectedBeforeAnyWork) {
  GridInputs in("grid_fail");
  GridConfig c = in.config(Experiment::perturb, "bad");
  c.perturb_modes = {"random", "scramble"};
  EXPECT_THROW(run_grid(c), Error);
}

TEST(Grid, MissingArtifactNamesThePath) {
  GridInputs in("grid_missing");
  GridConfig c = in.config(Experiment::perturb, "m");
  c.checkpoints.push_back(in.dir / "ghost.dtmc");
  try {
    run_grid(c);
    FAIL();
  } catch (const MissingArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("ghost.dtmc"), std::string::npos);
  }
}

TEST(Grid, RerunIsByteIdentical) {
  GridInputs in("grid_det");
  GridConfig c = in.config(Experiment::single_layer, "det");
  c.coefficients = {0.5};
  const std::string a = report_csv(run_grid(c));
  setenv("DTMERGE_THREADS", "1", 1);
  const std::string b = report_csv(run_grid(c));
  unsetenv("DTMERGE_THREADS");
  EXPECT_EQ(a, b);
}

TEST(AttentionMaps, SingleTokenWindowIsOne) {
  GridInputs in("maps_one");
  const AttentionMaps m = attention_maps(in.models[0], in.data[0].trajectories[0], 1);
  ASSERT_EQ(m.maps.size(), 3u);
  for (const auto& l : m.maps) EXPECT_EQ(l, std::vector<double>{1.0});
}

TEST(AttentionMaps, RowsAreCausalDistributions) {
  GridInputs in("maps_rows");
  const AttentionMaps m = attention_maps(in.models[1], in.data[1].trajectories[0], 30);
  EXPECT_EQ(m.windows, (3 * in.data[1].trajectories[0].length() - 30) / 3 + 1);
  for (const auto& l : m.maps)
    for (int64_t i = 0; i < 30; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < 30; ++j) {
        const double v = l[size_t(i * 30 + j)];
        if (j > i) EXPECT_EQ(v, 0.0);
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  const auto csv = parse_csv(attention_maps_csv(m));
  ASSERT_EQ(csv.size(), 1 + 3 * 30u);
  for (size_t r = 1; r < csv.size(); ++r) ASSERT_EQ(csv[r].size(), 32u);
  EXPECT_EQ(std::stod(csv[1 + 30 + 4][2 + 3]), m.maps[1][4 * 30 + 3]);
  EXPECT_EQ(frobenius_distance(m, m), 0.0);
  Trajectory shortest = in.data[1].trajectories[0];
  shortest.rewards.resize(2);
  shortest.states.resize(2 * 3);
  shortest.actions.resize(2);
  EXPECT_THROW(attention_maps(in.models[1], shortest, 9), Error);
}

TEST(AttentionMaps, RemovedAttentionStillYieldsMaps) {
  GridInputs in("maps_removed");
  const DTModel removed = perturb_attention(in.models[0], PerturbMode::removed);
  EXPECT_TRUE(attention_maps(removed, in.data[0].trajectories[0], 6).maps.empty());
}
