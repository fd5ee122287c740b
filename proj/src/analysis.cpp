#include "dtmerge/analysis.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include "dtmerge/checkpoint.hpp"
#include "dtmerge/io.hpp"
#include "dtmerge/merge.hpp"
#include "dtmerge/mff.hpp"
#include "dtmerge/rng.hpp"

namespace dtm {

using nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

ordered_json num(double v) { return std::isnan(v) ? ordered_json(nullptr) : ordered_json(v); }
double num_from(const ordered_json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

// ---------------------------------------------------------------------------
// Reports

bool EvalReport::failed() const {
  for (const auto& r : rows)
    if (r.status != "ok") return true;
  return false;
}

std::string report_csv(const EvalReport& report) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& r : report.rows) {
    const std::string coord = r.status == "ok" ? r.coordinate : "FAILED:" + r.coordinate;
    out += csv_field(r.experiment) + "," + csv_field(r.env) + "," + csv_field(coord) + "," + fmt_double(r.p_or_lambda) +
           "," + fmt_double(r.raw_return) + "," + fmt_double(r.normalized) + "," + fmt_double(r.pct_of_original) + "," +
           std::to_string(r.seed) + "\n";
  }
  return out;
}

ordered_json report_json(const EvalReport& report) {
  ordered_json j;
  j["run_id"] = report.run_id;
  j["experiment"] = report.experiment;
  j["config"] = report.config;
  ordered_json rows = ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"experiment", r.experiment},
                    {"env", r.env},
                    {"coordinate", r.coordinate},
                    {"p_or_lambda", num(r.p_or_lambda)},
                    {"raw_return", num(r.raw_return)},
                    {"normalized", num(r.normalized)},
                    {"pct_of_original", num(r.pct_of_original)},
                    {"seed", r.seed},
                    {"status", r.status}});
  }
  j["rows"] = std::move(rows);
  j["extra"] = report.extra;
  return j;
}

EvalReport report_from_json(const ordered_json& j) {
  EvalReport r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.experiment = j.at("experiment").get<std::string>();
    r.config = j.at("config");
    r.extra = j.at("extra");
    for (const auto& x : j.at("rows")) {
      ReportRow row;
      row.experiment = x.at("experiment").get<std::string>();
      row.env = x.at("env").get<std::string>();
      row.coordinate = x.at("coordinate").get<std::string>();
      row.p_or_lambda = num_from(x.at("p_or_lambda"));
      row.raw_return = num_from(x.at("raw_return"));
      row.normalized = num_from(x.at("normalized"));
      row.pct_of_original = num_from(x.at("pct_of_original"));
      row.seed = x.at("seed").get<uint64_t>();
      row.status = x.at("status").get<std::string>();
      r.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return r;
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto json_path = dir / (report.run_id + ".json");
  const auto csv_path = dir / (report.run_id + ".csv");
  if (std::filesystem::exists(json_path) || std::filesystem::exists(csv_path))
    throw Error("report for run id '" + report.run_id + "' already exists in " + dir.string() +
                "; reports are append-only, choose a new run id");
  atomic_write(csv_path, report_csv(report));
  atomic_write(json_path, report_json(report).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Grid configuration

std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::single_layer: return "single_layer";
    case Experiment::incremental: return "incremental";
    case Experiment::attention_sweep: return "attention_sweep";
    case Experiment::mff: return "mff";
    case Experiment::perturb: return "perturb";
    case Experiment::lm_merge: return "lm_merge";
    case Experiment::init_transfer: return "init_transfer";
  }
  return "?";
}

Experiment experiment_from_string(std::string_view s) {
  for (Experiment e : {Experiment::single_layer, Experiment::incremental, Experiment::attention_sweep, Experiment::mff,
                       Experiment::perturb, Experiment::lm_merge, Experiment::init_transfer})
    if (s == to_string(e)) return e;
  throw Error("unknown experiment '" + std::string(s) + "'");
}

GridConfig GridConfig::from_json(const ordered_json& j) {
  GridConfig c;
  try {
    c.experiment = experiment_from_string(j.at("experiment").get<std::string>());
    c.run_id = j.value("run_id", c.run_id);
    for (const auto& p : j.value("checkpoints", ordered_json::array())) c.checkpoints.emplace_back(p.get<std::string>());
    for (const auto& p : j.value("datasets", ordered_json::array())) c.datasets.emplace_back(p.get<std::string>());
    c.coefficients = j.value("coefficients", c.coefficients);
    c.selectors = j.value("selectors", c.selectors);
    c.perturb_modes = j.value("perturb_modes", c.perturb_modes);
    c.episodes = j.value("episodes", c.episodes);
    c.target_multiplier = j.value("target_multiplier", c.target_multiplier);
    c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
    c.epochs = j.value("epochs", c.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed grid config: ") + e.what());
  }
  return c;
}

ordered_json GridConfig::to_json() const {
  ordered_json j;
  j["experiment"] = std::string(dtm::to_string(experiment));
  j["run_id"] = run_id;
  ordered_json ck = ordered_json::array(), ds = ordered_json::array();
  for (const auto& p : checkpoints) ck.push_back(p.string());
  for (const auto& p : datasets) ds.push_back(p.string());
  j["checkpoints"] = ck;
  j["datasets"] = ds;
  j["coefficients"] = coefficients;
  j["selectors"] = selectors;
  j["perturb_modes"] = perturb_modes;
  j["episodes"] = episodes;
  j["target_multiplier"] = target_multiplier;
  j["finetune_steps"] = finetune_steps;
  j["epochs"] = epochs;
  j["steps_per_epoch"] = steps_per_epoch;
  j["seed"] = seed;
  return j;
}

uint64_t grid_eval_seed(uint64_t seed) { return derive_seed(seed, "eval"); }

int64_t worker_threads() {
  int64_t n = static_cast<int64_t>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("DTMERGE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) n = std::min<int64_t>(n, v);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Grid execution

namespace {

struct CellResult {
  std::vector<ReportRow> rows;
  ordered_json extra;  // merged into report.extra[label] when non-null
};

struct Cell {
  std::string label;
  std::function<CellResult()> run;
};

void run_cells(std::vector<Cell>& cells, std::vector<CellResult>& results, std::vector<std::string>& errors) {
  results.assign(cells.size(), {});
  errors.assign(cells.size(), "");
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = cells[i].run();
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int64_t n = std::min<int64_t>(worker_threads(), static_cast<int64_t>(cells.size()));
  if (n <= 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int64_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

class GridRunner {
 public:
  explicit GridRunner(const GridConfig& cfg) : cfg_(cfg), exp_(std::string(to_string(cfg.experiment))) {}

  EvalReport run() {
    EvalReport report;
    report.run_id = cfg_.run_id;
    report.experiment = exp_;
    report.config = cfg_.to_json();
    load_inputs();
    // Phase 1: every model's own evaluation, the denominator of pct_of_original.
    std::vector<Cell> base;
    for (size_t i = 0; i < models_.size(); ++i) {
      base.push_back({"original:" + models_[i].env.env, [this, i] {
                        const EvalResult r = eval(models_[i]);
                        return CellResult{{row(models_[i].env.env, "original", 0.0, r, r.normalized)}, nullptr};
                      }});
    }
    std::vector<CellResult> base_results;
    std::vector<std::string> base_errors;
    run_cells(base, base_results, base_errors);
    baselines_.assign(models_.size(), kNaN);
    for (size_t i = 0; i < base.size(); ++i) {
      if (base_errors[i].empty()) baselines_[i] = base_results[i].rows.front().normalized;
    }
    append(report, base, base_results, base_errors);

    std::vector<Cell> cells = build_cells();
    std::vector<CellResult> results;
    std::vector<std::string> errors;
    run_cells(cells, results, errors);
    append(report, cells, results, errors);
    if (cfg_.experiment == Experiment::init_transfer) finish_curves(report);
    return report;
  }

 private:
  void load_inputs() {
    for (const auto& p : cfg_.checkpoints) models_.push_back(load_model(p));
    for (const auto& p : cfg_.datasets) datasets_.push_back(load_dataset(p));
    const bool needs_pair = cfg_.experiment == Experiment::single_layer || cfg_.experiment == Experiment::incremental ||
                            cfg_.experiment == Experiment::attention_sweep || cfg_.experiment == Experiment::mff ||
                            cfg_.experiment == Experiment::lm_merge;
    if (needs_pair && models_.size() < 2) throw Error(exp_ + " needs at least two checkpoints");
    if (cfg_.experiment == Experiment::perturb && models_.empty()) throw Error("perturb needs at least one checkpoint");
    if ((cfg_.experiment == Experiment::mff || cfg_.experiment == Experiment::lm_merge) &&
        datasets_.size() != models_.size())
      throw Error(exp_ + " needs one dataset per checkpoint");
    if (cfg_.experiment == Experiment::init_transfer && datasets_.empty())
      throw Error("init_transfer needs a target dataset");
    if (cfg_.experiment == Experiment::lm_merge) {
      for (const auto& p : cfg_.checkpoints) {
        const Checkpoint c = load_checkpoint(p);
        lm_hashes_.push_back(c.provenance.value("lm_init_hash", std::string()));
      }
      for (const auto& h : lm_hashes_)
        if (h.empty() || h != lm_hashes_.front())
          throw Error("lm_merge: checkpoints do not share one recorded language-model initialization");
    }
  }

  EvalResult eval(const DTModel& m) const {
    return evaluate(m, cfg_.target_multiplier, cfg_.episodes, grid_eval_seed(cfg_.seed));
  }

  ReportRow row(const std::string& env, const std::string& coord, double p, const EvalResult& r, double base) const {
    ReportRow x;
    x.experiment = exp_;
    x.env = env;
    x.coordinate = coord;
    x.p_or_lambda = p;
    x.raw_return = r.mean_return;
    x.normalized = r.normalized;
    x.pct_of_original = 100.0 * r.normalized / base;
    x.seed = cfg_.seed;
    return x;
  }

  ReportRow mean_row(const std::vector<ReportRow>& rows, const std::string& coord, double p) const {
    ReportRow m;
    m.experiment = exp_;
    m.env = "mean";
    m.coordinate = coord;
    m.p_or_lambda = p;
    m.seed = cfg_.seed;
    for (const auto& r : rows) {
      m.raw_return += r.raw_return / static_cast<double>(rows.size());
      m.normalized += r.normalized / static_cast<double>(rows.size());
      m.pct_of_original += r.pct_of_original / static_cast<double>(rows.size());
    }
    return m;
  }

  std::vector<double> coefficients(std::vector<double> fallback) const {
    return cfg_.coefficients.empty() ? fallback : cfg_.coefficients;
  }

  std::vector<std::pair<size_t, size_t>> pairs() const {
    std::vector<std::pair<size_t, size_t>> out;
    for (size_t i = 0; i < models_.size(); ++i)
      for (size_t j = i + 1; j < models_.size(); ++j) out.emplace_back(i, j);
    return out;
  }

  DTModel with_params(size_t i, ParameterTree params) const {
    DTModel m = models_[i];
    m.params = std::move(params);
    return m;
  }

  std::vector<Cell> build_cells() {
    switch (cfg_.experiment) {
      case Experiment::single_layer: return single_layer_cells();
      case Experiment::incremental: return incremental_cells();
      case Experiment::attention_sweep: return sweep_cells();
      case Experiment::perturb: return perturb_cells();
      case Experiment::mff: return mff_cells({"attention"});
      case Experiment::lm_merge: return mff_cells({"attention", "attention+mlp"});
      case Experiment::init_transfer: return init_transfer_cells();
    }
    return {};
  }

  std::vector<Cell> single_layer_cells() {
    std::vector<Cell> cells;
    const auto units = layer_units(models_.front().arch);
    for (auto [a, b] : pairs()) {
      for (const auto& unit : units) {
        for (double p : coefficients({0.5, 1.0})) {
          cells.push_back({"single_layer:" + unit, [this, a, b, unit, p] {
                             const LayerSelector sel = LayerSelector::unit(unit);
                             CellResult out;
                             for (auto [t, s] : {std::pair{a, b}, std::pair{b, a}}) {
                               const DTModel m = with_params(t, merge_layer(models_[t].params, models_[s].params, sel, p));
                               out.rows.push_back(row(models_[t].env.env, unit, p, eval(m), baselines_[t]));
                             }
                             out.rows.push_back(mean_row(out.rows, unit, p));
                             return out;
                           }});
        }
      }
    }
    return cells;
  }

  std::vector<Cell> incremental_cells() {
    std::vector<Cell> cells;
    const ArchConfig arch = models_.front().arch;
    const auto units = layer_units(arch);
    for (auto [a, b] : pairs()) {
      for (double p : coefficients({0.5, 1.0})) {
        for (size_t k = 0; k <= units.size(); ++k) {
          const std::string coord = "k=" + std::to_string(k) + (k ? ":" + units[k - 1] : std::string());
          cells.push_back({"incremental:" + coord, [this, a, b, k, p, coord, arch] {
                             const LayerSelector sel = LayerSelector::depth_prefix(static_cast<int64_t>(k), arch);
                             CellResult out;
                             for (auto [t, s] : {std::pair{a, b}, std::pair{b, a}}) {
                               const DTModel m = with_params(t, merge_layer(models_[t].params, models_[s].params, sel, p));
                               out.rows.push_back(row(models_[t].env.env, coord, p, eval(m), baselines_[t]));
                             }
                             out.rows.push_back(mean_row(out.rows, coord, p));
                             return out;
                           }});
        }
      }
    }
    return cells;
  }

  std::vector<Cell> sweep_cells() {
    std::vector<Cell> cells;
    for (auto [a, b] : pairs()) {
      for (double lambda : coefficients({0.0, 0.25, 0.5, 0.75, 1.0})) {
        cells.push_back({"attention_sweep", [this, a, b, lambda] {
                           const LayerSelector sel = LayerSelector::attention_all();
                           const ParameterTree theta = interpolate(models_[a].params, models_[b].params, lambda, sel);
                           ParameterTree for_b = models_[b].params;
                           for_b.update_from(select(theta, sel));
                           CellResult out;
                           out.rows.push_back(row(models_[a].env.env, "attention", lambda, eval(with_params(a, theta)), baselines_[a]));
                           out.rows.push_back(row(models_[b].env.env, "attention", lambda, eval(with_params(b, for_b)), baselines_[b]));
                           return out;
                         }});
      }
    }
    return cells;
  }

  std::vector<Cell> perturb_cells() {
    std::vector<Cell> cells;
    const std::vector<std::string> modes =
        cfg_.perturb_modes.empty() ? std::vector<std::string>{"random", "identity", "removed"} : cfg_.perturb_modes;
    for (const auto& name : modes) perturb_mode_from_string(name);
    for (size_t i = 0; i < models_.size(); ++i) {
      for (const auto& name : modes) {
        cells.push_back({"perturb:" + name, [this, i, name] {
                           const DTModel m = perturb_attention(models_[i], perturb_mode_from_string(name),
                                                               derive_seed(cfg_.seed, "perturb"));
                           return CellResult{{row(models_[i].env.env, name, 0.0, eval(m), baselines_[i])}, nullptr};
                         }});
      }
    }
    return cells;
  }

  std::vector<Cell> mff_cells(std::vector<std::string> fallback) {
    std::vector<Cell> cells;
    const std::vector<std::string> selectors = cfg_.selectors.empty() ? fallback : cfg_.selectors;
    for (const auto& sel_text : selectors) {
      if (sel_text == "frozen_transfer") {
        for (size_t s = 0; s < models_.size(); ++s) {
          for (size_t t = 0; t < models_.size(); ++t) {
            if (s == t) continue;
            cells.push_back({"frozen_transfer:" + models_[s].env.env + "->" + models_[t].env.env, [this, s, t] {
                               TrainConfig tc;
                               tc.seed = derive_seed(cfg_.seed, "frozen-transfer");
                               const DTModel m =
                                   frozen_transfer(models_[s], datasets_[t], &models_[t], cfg_.finetune_steps, tc);
                               const std::string coord = "frozen_from_" + models_[s].env.env;
                               return CellResult{{row(models_[t].env.env, coord, 0.0, eval(m), baselines_[t])}, nullptr};
                             }});
          }
        }
        continue;
      }
      const LayerSelector sel = LayerSelector::parse(sel_text, models_.front().arch);
      cells.push_back({"mff:" + sel_text, [this, sel, sel_text] {
                         const double coef = 1.0 / static_cast<double>(models_.size());
                         CellResult out;
                         // Plain merge (no finetuning).
                         const ParameterTree shared = average_selection(models_, sel);
                         std::vector<ReportRow> merged_rows, mff_rows;
                         for (size_t t = 0; t < models_.size(); ++t) {
                           ParameterTree p = models_[t].params;
                           p.update_from(shared);
                           merged_rows.push_back(row(models_[t].env.env, sel_text + ":M", coef, eval(with_params(t, p)), baselines_[t]));
                         }
                         std::vector<const OfflineDataset*> ds;
                         for (const auto& d : datasets_) ds.push_back(&d);
                         MFFConfig mc;
                         mc.finetune_steps = cfg_.finetune_steps;
                         mc.train.seed = derive_seed(cfg_.seed, "mff");
                         const MultiTaskBundle bundle = merge_freeze_finetune(models_, ds, sel, mc);
                         for (size_t t = 0; t < bundle.tasks.size(); ++t)
                           mff_rows.push_back(row(models_[t].env.env, sel_text + ":MFF", coef, eval(bundle.tasks[t]), baselines_[t]));
                         merged_rows.push_back(mean_row(merged_rows, sel_text + ":M", coef));
                         mff_rows.push_back(mean_row(mff_rows, sel_text + ":MFF", coef));
                         out.rows = merged_rows;
                         out.rows.insert(out.rows.end(), mff_rows.begin(), mff_rows.end());
                         const SizeReport size = transformer_size_ratio(sel, models_.front().arch,
                                                                        static_cast<int64_t>(models_.size()));
                         bool audits_ok = true;
                         for (const auto& a : bundle.audits) audits_ok = audits_ok && a.hash == bundle.shared_hash;
                         out.extra = {{"selector", sel_text},
                                      {"n_tasks", models_.size()},
                                      {"transformer_size_pct", size.percent},
                                      {"shared_params", size.shared},
                                      {"unique_params", size.unique},
                                      {"shared_hash", bundle.shared_hash},
                                      {"freeze_audits", bundle.audits.size()},
                                      {"freeze_audits_ok", audits_ok}};
                         return out;
                       }});
    }
    return cells;
  }

  std::vector<Cell> init_transfer_cells() {
    std::vector<Cell> cells;
    const std::vector<std::string> inits =
        cfg_.selectors.empty()
            ? (models_.empty() ? std::vector<std::string>{"random"}
                               : std::vector<std::string>{"random", "trained:0", "merged_attention", "merged_all"})
            : cfg_.selectors;
    const ArchConfig arch = models_.empty() ? ArchConfig{} : models_.front().arch;
    for (const auto& init : inits) {
      cells.push_back({"init_transfer:" + init, [this, init, arch] {
                         std::optional<ParameterTree> tree;
                         LayerSelector copy = LayerSelector::transformer_all();
                         if (init.rfind("trained:", 0) == 0) {
                           const size_t i = std::stoul(init.substr(8));
                           if (i >= models_.size()) throw Error("init_transfer: no checkpoint " + init.substr(8));
                           tree = models_[i].params;
                         } else if (init == "merged_attention" || init == "merged_all") {
                           if (models_.size() < 2) throw Error("init_transfer: merged init needs two checkpoints");
                           if (init == "merged_attention") copy = LayerSelector::attention_all();
                           tree = average_selection(models_, copy);
                         } else if (init != "random") {
                           throw Error("init_transfer: unknown initialization '" + init + "'");
                         }
                         TrainConfig tc;
                         tc.seed = derive_seed(cfg_.seed, "init-transfer");
                         tc.eval_episodes = cfg_.episodes;
                         tc.target_multiplier = cfg_.target_multiplier;
                         const auto curve = init_transfer(tree ? &*tree : nullptr, copy, arch, datasets_.front(),
                                                          cfg_.epochs, cfg_.steps_per_epoch, tc,
                                                          derive_seed(cfg_.seed, "init-transfer-model"));
                         CellResult out;
                         for (const auto& pt : curve) {
                           ReportRow r;
                           r.experiment = exp_;
                           r.env = datasets_.front().env;
                           r.coordinate = init + ":epoch" + std::to_string(pt.epoch);
                           r.p_or_lambda = static_cast<double>(pt.epoch);
                           r.raw_return = pt.mean_return;
                           r.normalized = pt.normalized;
                           r.pct_of_original = kNaN;
                           r.seed = cfg_.seed;
                           out.rows.push_back(r);
                         }
                         return out;
                       }});
    }
    return cells;
  }

  // Curve rows are relative to the random-init control at the same epoch.
  void finish_curves(EvalReport& report) const {
    std::map<double, double> control;
    for (const auto& r : report.rows)
      if (r.status == "ok" && r.coordinate.rfind("random:", 0) == 0) control[r.p_or_lambda] = r.normalized;
    for (auto& r : report.rows) {
      if (r.coordinate == "original" || r.status != "ok") continue;
      auto it = control.find(r.p_or_lambda);
      if (it != control.end()) r.pct_of_original = 100.0 * r.normalized / it->second;
    }
  }

  void append(EvalReport& report, const std::vector<Cell>& cells, const std::vector<CellResult>& results,
              const std::vector<std::string>& errors) const {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (!errors[i].empty()) {
        ReportRow r;
        r.experiment = exp_;
        r.coordinate = cells[i].label;
        r.p_or_lambda = r.raw_return = r.normalized = r.pct_of_original = kNaN;
        r.seed = cfg_.seed;
        r.status = "failed: " + errors[i];
        report.rows.push_back(r);
        continue;
      }
      for (const auto& r : results[i].rows) report.rows.push_back(r);
      if (!results[i].extra.is_null()) report.extra[cells[i].label] = results[i].extra;
    }
  }

  const GridConfig& cfg_;
  std::string exp_;
  std::vector<DTModel> models_;
  std::vector<OfflineDataset> datasets_;
  std::vector<double> baselines_;
  std::vector<std::string> lm_hashes_;
};

}  // namespace

EvalReport run_grid(const GridConfig& cfg) { return GridRunner(cfg).run(); }

// ---------------------------------------------------------------------------
// Attention maps

AttentionMaps attention_maps(const DTModel& model, const Trajectory& trajectory, int64_t tokens, int64_t stride) {
  const int64_t T = trajectory.length();
  const int64_t total = 3 * T, d = model.arch.d_embed;
  if (tokens <= 0 || stride <= 0) throw Error("attention_maps: window and stride must be positive");
  if (tokens > model.arch.context_positions)
    throw Error("attention_maps: window of " + std::to_string(tokens) + " tokens exceeds the model's " +
                std::to_string(model.arch.context_positions) + " positions");
  if (T == 0 || total < tokens)
    throw Error("attention_maps: trajectory of " + std::to_string(T) + " steps is shorter than one window");
  const std::vector<double> rtg = compute_rtg(trajectory.rewards);

  ad::Graph g({.training = false});
  const ParamVars p = bind_parameters(g, model.params, [](std::string_view) { return false; });
  DTBatch full(1, T, model.env.state_dim, model.env.action_dim);
  tokenize(trajectory, rtg, 0, full, 0);
  const Tensor& stream = g.value(dt_embed_tokens(g, p, model, full));  // [1, 3T, d]

  const int64_t W = (total - tokens) / stride + 1;
  Tensor windows({W, tokens, d});
  for (int64_t w = 0; w < W; ++w)
    std::copy_n(stream.ptr() + w * stride * d, tokens * d, windows.mutable_ptr() + w * tokens * d);
  ad::Var x = g.input(std::move(windows));
  ad::Var h = g.layer_norm(x, param(p, "dt.embed_ln.gamma"), param(p, "dt.embed_ln.beta"));
  std::vector<ad::Var> probs;
  transformer_forward(g, p, model.arch, g.reshape(h, {W * tokens, d}), W, tokens, &probs);

  AttentionMaps out;
  out.tokens = tokens;
  out.windows = W;
  for (ad::Var pv : probs) {
    const Tensor& P = g.value(pv);  // [W * heads, n, n]
    const int64_t mats = P.dim(0);
    std::vector<double> avg(static_cast<size_t>(tokens * tokens), 0.0);
    for (int64_t m = 0; m < mats; ++m)
      for (int64_t i = 0; i < tokens * tokens; ++i) avg[static_cast<size_t>(i)] += P[m * tokens * tokens + i];
    for (double& v : avg) v /= static_cast<double>(mats);
    out.maps.push_back(std::move(avg));
  }
  return out;
}

std::string attention_maps_csv(const AttentionMaps& maps) {
  std::string out = "layer,row";
  for (int64_t c = 0; c < maps.tokens; ++c) out += ",c" + std::to_string(c);
  out += "\n";
  char buf[64];
  for (size_t l = 0; l < maps.maps.size(); ++l) {
    for (int64_t r = 0; r < maps.tokens; ++r) {
      out += std::to_string(l) + "," + std::to_string(r);
      for (int64_t c = 0; c < maps.tokens; ++c) {
        std::snprintf(buf, sizeof buf, ",%.17g", maps.maps[l][static_cast<size_t>(r * maps.tokens + c)]);
        out += buf;
      }
      out += "\n";
    }
  }
  return out;
}

double frobenius_distance(const AttentionMaps& a, const AttentionMaps& b) {
  if (a.tokens != b.tokens || a.maps.size() != b.maps.size()) throw Error("frobenius_distance: map shapes differ");
  double s = 0.0;
  for (size_t l = 0; l < a.maps.size(); ++l)
    for (size_t i = 0; i < a.maps[l].size(); ++i) {
      const double e = a.maps[l][i] - b.maps[l][i];
      s += e * e;
    }
  return std::sqrt(s);
}

}  // namespace dtm
