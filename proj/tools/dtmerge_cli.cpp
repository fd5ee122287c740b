#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "dtmerge/analysis.hpp"
#include "dtmerge/checkpoint.hpp"
#include "dtmerge/io.hpp"
#include "dtmerge/lm.hpp"
#include "dtmerge/merge.hpp"
#include "dtmerge/mff.hpp"
#include "dtmerge/rng.hpp"

using namespace dtm;
using nlohmann::ordered_json;

namespace {

// Exit codes: 2 for command-line errors, 3 for malformed files, 4 for version mismatches.
constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitVersion = 4;

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_json(const ordered_json& j) { std::cout << j.dump(2) << "\n"; }

struct Options {
  // gen-data
  std::string env = "PointMass2D", quality = "expert", out;
  int64_t n_traj = 500;
  // shared
  uint64_t seed = 0;
  std::string data, ckpt;
  std::vector<std::string> ckpts, datas;
  // train
  int64_t steps = 5000, eval_every = 0, episodes = 25;
  double lr = 1e-4, stop_at = std::numeric_limits<double>::quiet_NaN(), multiplier = 1.0;
  std::string lm;
  bool cotrain = false;
  double lambda1 = 0.1;
  int64_t clusters = 32, lm_batch = 16;
  // pretrain-lm
  int64_t chars = 1'000'000, batch = 32;
  uint64_t corpus_seed = 0;
  // merge
  std::string a, b, pre, select = "attention", mode = "interpolate";
  double lambda = 0.5;
  // perturb
  std::string perturb_mode = "random";
  // grid / report
  std::string config, in, format = "csv", out_dir, run_id;
  // attn-maps
  int64_t traj = 0, tokens = 30, stride = 3;
  int64_t tasks = 2;
};

int cmd_gen_data(const Options& o) {
  const EnvSpec& env = env_by_name(o.env);
  const OfflineDataset ds = generate_dataset(env, dataset_quality_from_string(o.quality), o.n_traj, o.seed);
  save_dataset(ds, o.out);
  print_json({{"env", ds.env},
              {"quality", o.quality},
              {"trajectories", ds.trajectories.size()},
              {"max_return", ds.max_return()},
              {"references", {{"random", ds.refs.random_ref}, {"medium", ds.refs.medium_ref}, {"expert", ds.refs.expert_ref}}},
              {"out", o.out}});
  return 0;
}

int cmd_train(const Options& o) {
  const OfflineDataset ds = load_dataset(o.data);
  TrainConfig tc;
  tc.steps = o.steps;
  tc.seed = o.seed;
  tc.adam.lr = o.lr;
  tc.eval_every = o.eval_every;
  tc.eval_episodes = o.episodes;
  tc.stop_at_score = o.stop_at;
  tc.target_multiplier = o.multiplier;
  DTModel model;
  TrainLog log;
  ordered_json prov = {{"kind", "dt"}, {"dataset", o.data}, {"seed", o.seed}, {"steps", o.steps}};
  if (!o.lm.empty()) {
    const Checkpoint lm = load_checkpoint(o.lm);
    prov["lm_init_hash"] = lm_init_hash(lm);
    prov["lm"] = o.lm;
    if (o.cotrain) {
      CoTrainConfig co;
      co.lambda1_init = o.lambda1;
      co.n_clusters = o.clusters;
      co.lm_batch = o.lm_batch;
      model = cotrain_dt(lm, ds, tc, co, &log);
      prov["cotrain"] = {{"lambda1_init", co.lambda1_init}, {"n_clusters", co.n_clusters}, {"lm_batch", co.lm_batch}};
    } else {
      model = dt_from_lm(lm, EnvBinding::from_dataset(ds), derive_seed(o.seed, "projections"));
      log = train_dt(model, ds, tc);
    }
  } else {
    if (o.cotrain) throw Error("--cotrain needs --lm");
    model = init_dt_model(ArchConfig{}, EnvBinding::from_dataset(ds), derive_seed(o.seed, "init"));
    log = train_dt(model, ds, tc);
  }
  prov["steps_run"] = log.steps_run;
  save_model(model, o.out, prov);
  ordered_json evals = ordered_json::array();
  for (auto [s, v] : log.eval_scores) evals.push_back({{"step", s}, {"normalized", v}});
  print_json({{"out", o.out},
              {"steps_run", log.steps_run},
              {"final_loss", log.losses.empty() ? 0.0 : log.losses.back()},
              {"evaluations", evals},
              {"content_hash", model.params.content_hash()}});
  return 0;
}

int cmd_pretrain_lm(const Options& o) {
  const Corpus corpus = generate_corpus(o.corpus_seed, o.chars);
  LMTrainConfig cfg;
  cfg.steps = o.steps;
  cfg.seed = o.seed;
  cfg.batch_size = o.batch;
  cfg.adam.lr = o.lr;
  LMTrainLog log;
  const Checkpoint c = pretrain_lm(corpus, default_lm_arch(), cfg, &log);
  save_checkpoint(c, o.out);
  print_json({{"out", o.out},
              {"steps", o.steps},
              {"perplexity", log.perplexity},
              {"unigram_perplexity", log.unigram_perplexity},
              {"lm_init_hash", lm_init_hash(c)}});
  return 0;
}

int cmd_merge(const Options& o) {
  const Checkpoint a = load_checkpoint(o.a);
  const Checkpoint b = load_checkpoint(o.b);
  MergeSpec spec;
  spec.selector = LayerSelector::parse(o.select, a.arch);
  spec.coefficient = o.lambda;
  spec.mode = merge_mode_from_string(o.mode);
  std::optional<Checkpoint> pre;
  if (!o.pre.empty()) pre = load_checkpoint(o.pre);
  Checkpoint out = a;
  out.params = apply_merge(spec, a.params, b.params, pre ? &pre->params : nullptr);
  out.provenance = {{"kind", "merge"},
                    {"a", o.a},
                    {"b", o.b},
                    {"selector", spec.selector.name()},
                    {"coefficient", spec.coefficient},
                    {"mode", std::string(to_string(spec.mode))}};
  if (a.provenance.contains("lm_init_hash")) out.provenance["lm_init_hash"] = a.provenance["lm_init_hash"];
  save_checkpoint(out, o.out);
  print_json({{"out", o.out}, {"content_hash", out.params.content_hash()}});
  return 0;
}

int cmd_mff(const Options& o) {
  if (o.ckpts.size() != o.datas.size()) throw Error("mff: give one --data per --ckpt");
  std::vector<DTModel> models;
  std::vector<OfflineDataset> datasets;
  for (const auto& p : o.ckpts) models.push_back(load_model(p));
  for (const auto& p : o.datas) datasets.push_back(load_dataset(p));
  std::vector<const OfflineDataset*> ptrs;
  for (const auto& d : datasets) ptrs.push_back(&d);
  MFFConfig cfg;
  cfg.finetune_steps = o.steps;
  cfg.train.seed = o.seed;
  cfg.train.adam.lr = o.lr;
  const LayerSelector sel = LayerSelector::parse(o.select, models.front().arch);
  const MultiTaskBundle bundle = merge_freeze_finetune(models, ptrs, sel, cfg);
  save_bundle(bundle, o.out_dir);
  const SizeReport size = transformer_size_ratio(sel, models.front().arch, static_cast<int64_t>(models.size()));
  ordered_json tasks = ordered_json::array();
  const uint64_t eval_seed = grid_eval_seed(o.seed);
  for (size_t t = 0; t < models.size(); ++t) {
    const EvalResult before = evaluate(models[t], o.multiplier, o.episodes, eval_seed);
    const EvalResult after = evaluate(bundle.tasks[t], o.multiplier, o.episodes, eval_seed);
    tasks.push_back({{"env", models[t].env.env},
                     {"original_normalized", before.normalized},
                     {"mff_normalized", after.normalized},
                     {"pct_of_original", 100.0 * after.normalized / before.normalized}});
  }
  print_json({{"out_dir", o.out_dir},
              {"selector", sel.name()},
              {"shared_hash", bundle.shared_hash},
              {"freeze_audits", bundle.audits.size()},
              {"transformer_size_pct", size.percent},
              {"tasks", tasks}});
  return 0;
}

int cmd_perturb(const Options& o) {
  const Checkpoint c = load_checkpoint(o.ckpt);
  const DTModel m = perturb_attention(to_model(c), perturb_mode_from_string(o.perturb_mode), o.seed);
  ordered_json prov = c.provenance;
  prov["perturb"] = {{"mode", o.perturb_mode}, {"seed", o.seed}};
  save_model(m, o.out, prov);
  print_json({{"out", o.out}, {"mode", o.perturb_mode}, {"content_hash", m.params.content_hash()}});
  return 0;
}

int cmd_eval(const Options& o) {
  const DTModel m = load_model(o.ckpt);
  const EvalResult r = evaluate(m, o.multiplier, o.episodes, o.seed);
  ordered_json returns = ordered_json::array();
  for (double v : r.returns) returns.push_back(fmt17(v));
  print_json({{"env", r.env},
              {"episodes", o.episodes},
              {"seed", o.seed},
              {"mean_return", fmt17(r.mean_return)},
              {"normalized", fmt17(r.normalized)},
              {"returns", returns}});
  return 0;
}

int cmd_grid(const Options& o) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(o.config));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed grid config: ") + e.what());
  }
  GridConfig cfg = GridConfig::from_json(j);
  if (!o.run_id.empty()) cfg.run_id = o.run_id;
  const EvalReport report = run_grid(cfg);
  write_report(report, o.out_dir);
  std::cout << report_csv(report);
  if (report.failed()) {
    std::cerr << "grid finished with failed cells; see " << (std::filesystem::path(o.out_dir) / (cfg.run_id + ".json"))
              << "\n";
    return 1;
  }
  return 0;
}

int cmd_report(const Options& o) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(o.in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  const EvalReport r = report_from_json(j);
  if (o.format == "csv") {
    std::cout << report_csv(r);
  } else if (o.format == "json") {
    print_json(report_json(r));
  } else {
    throw Error("report: unknown format '" + o.format + "' (csv or json)");
  }
  return 0;
}

int cmd_attn_maps(const Options& o) {
  const DTModel m = load_model(o.ckpt);
  const OfflineDataset ds = load_dataset(o.data);
  if (o.traj < 0 || o.traj >= static_cast<int64_t>(ds.trajectories.size()))
    throw Error("attn-maps: trajectory index out of range");
  const AttentionMaps maps = attention_maps(m, ds.trajectories[static_cast<size_t>(o.traj)], o.tokens, o.stride);
  atomic_write(o.out, attention_maps_csv(maps));
  print_json({{"out", o.out}, {"layers", maps.maps.size()}, {"tokens", maps.tokens}, {"windows", maps.windows}});
  return 0;
}

int cmd_size(const Options& o) {
  const ArchConfig arch;
  const SizeReport r = transformer_size_ratio(LayerSelector::parse(o.select, arch), arch, o.tasks);
  print_json({{"selector", r.selector},
              {"n_tasks", r.n_tasks},
              {"transformer_params", r.total},
              {"shared", r.shared},
              {"unique", r.unique},
              {"percent", r.percent}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decision Transformer merging toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate an offline dataset");
  gen->add_option("--env", o.env, "PointMass2D, Swing or Arm2")->required();
  gen->add_option("--quality", o.quality, "medium, expert or medium-expert");
  gen->add_option("--n", o.n_traj, "trajectories (per tier)");
  gen->add_option("--seed", o.seed);
  gen->add_option("--out", o.out)->required();

  auto* train = app.add_subcommand("train", "Train a Decision Transformer");
  train->add_option("--data", o.data)->required();
  train->add_option("--out", o.out)->required();
  train->add_option("--steps", o.steps);
  train->add_option("--seed", o.seed);
  train->add_option("--lr", o.lr);
  train->add_option("--eval-every", o.eval_every);
  train->add_option("--episodes", o.episodes);
  train->add_option("--stop-at", o.stop_at, "stop once a periodic evaluation reaches this normalized score");
  train->add_option("--multiplier", o.multiplier);
  train->add_option("--lm", o.lm, "initialize the transformer from a language-model checkpoint");
  train->add_flag("--cotrain", o.cotrain, "add the language-model co-training objective");
  train->add_option("--lambda1", o.lambda1);
  train->add_option("--clusters", o.clusters);
  train->add_option("--lm-batch", o.lm_batch);

  auto* plm = app.add_subcommand("pretrain-lm", "Pretrain the transformer as a character language model");
  plm->add_option("--out", o.out)->required();
  plm->add_option("--steps", o.steps);
  plm->add_option("--seed", o.seed);
  plm->add_option("--corpus-seed", o.corpus_seed);
  plm->add_option("--chars", o.chars);
  plm->add_option("--batch", o.batch);
  plm->add_option("--lr", o.lr);

  auto* merge = app.add_subcommand("merge", "Merge two checkpoints");
  merge->add_option("--a", o.a)->required();
  merge->add_option("--b", o.b)->required();
  merge->add_option("--select", o.select);
  merge->add_option("--lambda,-p", o.lambda);
  merge->add_option("--mode", o.mode, "merge, swap, interpolate or task_arithmetic");
  merge->add_option("--pre", o.pre, "shared initialization (task_arithmetic)");
  merge->add_option("--out", o.out)->required();

  auto* mff = app.add_subcommand("mff", "Merge, freeze and finetune");
  mff->add_option("--ckpt", o.ckpts)->required();
  mff->add_option("--data", o.datas)->required();
  mff->add_option("--select", o.select);
  mff->add_option("--steps", o.steps);
  mff->add_option("--seed", o.seed);
  mff->add_option("--lr", o.lr);
  mff->add_option("--episodes", o.episodes);
  mff->add_option("--multiplier", o.multiplier);
  mff->add_option("--out-dir", o.out_dir)->required();

  auto* perturb = app.add_subcommand("perturb", "Perturb attention parameters");
  perturb->add_option("--ckpt", o.ckpt)->required();
  perturb->add_option("--mode", o.perturb_mode, "random, identity, eye or removed");
  perturb->add_option("--seed", o.seed);
  perturb->add_option("--out", o.out)->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", o.ckpt)->required();
  eval->add_option("--episodes", o.episodes);
  eval->add_option("--seed", o.seed);
  eval->add_option("--multiplier", o.multiplier);

  auto* grid = app.add_subcommand("grid", "Run an experiment grid");
  grid->add_option("--config", o.config)->required();
  grid->add_option("--out-dir", o.out_dir)->required();
  grid->add_option("--run-id", o.run_id);

  auto* report = app.add_subcommand("report", "Render a grid report");
  report->add_option("--in", o.in)->required();
  report->add_option("--format", o.format, "csv or json");

  auto* maps = app.add_subcommand("attn-maps", "Average attention maps over a trajectory");
  maps->add_option("--ckpt", o.ckpt)->required();
  maps->add_option("--data", o.data)->required();
  maps->add_option("--traj", o.traj);
  maps->add_option("--tokens", o.tokens, "window length in tokens");
  maps->add_option("--stride", o.stride);
  maps->add_option("--out", o.out)->required();

  auto* size = app.add_subcommand("size", "Multi-task transformer size for a shared selection");
  size->add_option("--select", o.select);
  size->add_option("--tasks", o.tasks);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*plm) return cmd_pretrain_lm(o);
    if (*merge) return cmd_merge(o);
    if (*mff) return cmd_mff(o);
    if (*perturb) return cmd_perturb(o);
    if (*eval) return cmd_eval(o);
    if (*grid) return cmd_grid(o);
    if (*report) return cmd_report(o);
    if (*maps) return cmd_attn_maps(o);
    if (*size) return cmd_size(o);
  } catch (const VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVersion;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
