#include "dtmerge/mff.hpp"

#include "dtmerge/io.hpp"
#include "dtmerge/merge.hpp"
#include "dtmerge/rng.hpp"

namespace dtm {

using nlohmann::ordered_json;

ParameterTree average_selection(const std::vector<DTModel>& models, const LayerSelector& selector) {
  if (models.size() < 2) throw Error("merge needs at least two models, got " + std::to_string(models.size()));
  const double w = 1.0 / static_cast<double>(models.size());
  const ParameterTree& first = models.front().params;
  for (const auto& m : models) {
    if (!(m.arch.n_layers == models[0].arch.n_layers && m.arch.d_embed == models[0].arch.d_embed &&
          m.arch.n_heads == models[0].arch.n_heads && m.arch.mlp_ratio == models[0].arch.mlp_ratio))
      throw Error("merge: architectures differ");
  }
  ParameterTree out;
  for (const auto& e : first.entries()) {
    if (!selector.matches(e.name)) continue;
    Tensor t(e.value.shape());
    std::vector<const float*> src;
    for (const auto& m : models) {
      if (!m.params.contains(e.name) || m.params.at(e.name).shape() != e.value.shape())
        throw ShapeError("merge: entry " + e.name + " is missing or differs in shape across models");
      src.push_back(m.params.at(e.name).ptr());
    }
    for (int64_t i = 0; i < t.numel(); ++i) {
      double s = 0.0;
      for (const float* p : src) s += w * p[i];
      t[i] = static_cast<float>(s);
    }
    out.add(e.name, std::move(t), true);
  }
  return out;
}

MultiTaskBundle merge_freeze_finetune(const std::vector<DTModel>& models,
                                      const std::vector<const OfflineDataset*>& datasets,
                                      const LayerSelector& selector, const MFFConfig& cfg) {
  if (datasets.size() != models.size()) throw Error("merge_freeze_finetune: need one dataset per model");
  MultiTaskBundle b;
  b.selector = selector.name();
  b.coefficient = 1.0 / static_cast<double>(models.size());
  b.finetune_steps = cfg.finetune_steps;
  b.shared = average_selection(models, selector);
  b.shared_hash = b.shared.content_hash();
  b.provenance["merge"] = {{"selector", selector.name()}, {"coefficient", b.coefficient}, {"mode", "merge"}};
  b.provenance["finetune_steps"] = cfg.finetune_steps;
  b.provenance["seed"] = cfg.train.seed;
  if (b.shared.empty()) {
    b.tasks = models;
    b.finetune_steps = 0;
    return b;
  }
  for (size_t t = 0; t < models.size(); ++t) {
    DTModel m = models[t];
    if (datasets[t] == nullptr || datasets[t]->env != m.env.env)
      throw Error("merge_freeze_finetune: dataset for task " + std::to_string(t) + " does not match " + m.env.env);
    m.params.update_from(b.shared);
    auto audit = [&](int64_t step, const DTModel& cur) {
      const std::string h = select(cur.params, selector).content_hash();
      b.audits.push_back({static_cast<int64_t>(t), step, h});
      if (h != b.shared_hash)
        throw Error("freeze violated: shared parameters of task " + std::to_string(t) + " changed by step " +
                    std::to_string(step));
    };
    audit(0, m);
    TrainConfig tc = cfg.train;
    tc.steps = cfg.finetune_steps;
    tc.seed = derive_seed(cfg.train.seed, static_cast<uint64_t>(t));
    tc.aux = nullptr;
    tc.trainable = [](std::string_view n) { return n.substr(0, 8) != "lm_head."; };
    auto user_hook = cfg.train.on_step;
    tc.on_step = [&](int64_t step, const DTModel& cur) {
      if (cfg.audit_every > 0 && step % cfg.audit_every == 0) audit(step, cur);
      if (user_hook) user_hook(step, cur);
    };
    if (cfg.finetune_steps > 0) train_dt(m, *datasets[t], tc);
    if (cfg.audit_every <= 0 || cfg.finetune_steps % cfg.audit_every != 0) audit(cfg.finetune_steps, m);
    b.tasks.push_back(std::move(m));
  }
  return b;
}

void save_bundle(const MultiTaskBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (b.tasks.empty()) throw Error("save_bundle: bundle has no tasks");
  ordered_json manifest;
  manifest["selector"] = b.selector;
  manifest["coefficient"] = b.coefficient;
  manifest["finetune_steps"] = b.finetune_steps;
  manifest["provenance"] = b.provenance;
  Checkpoint shared;
  shared.arch = b.tasks.front().arch;
  shared.arch.attention_removed = false;
  shared.context_len = b.tasks.front().context_len;
  shared.params = b.shared;
  shared.provenance = {{"kind", "bundle_shared"}, {"selector", b.selector}};
  save_checkpoint(shared, dir / "shared.dtmc");
  manifest["shared"] = {{"file", "shared.dtmc"}, {"content_hash", b.shared.content_hash()}};
  ordered_json tasks = ordered_json::array();
  for (size_t t = 0; t < b.tasks.size(); ++t) {
    const DTModel& m = b.tasks[t];
    Checkpoint c = to_checkpoint(m);
    c.params = m.params.filter([&](std::string_view n) { return !b.shared.contains(n); });
    c.provenance = {{"kind", "bundle_task"}, {"tree_order", m.params.names()}};
    const std::string file = "task" + std::to_string(t) + "_" + m.env.env + ".dtmc";
    save_checkpoint(c, dir / file);
    tasks.push_back({{"env", m.env.env}, {"file", file}, {"content_hash", c.params.content_hash()}});
  }
  manifest["tasks"] = std::move(tasks);
  ordered_json audits = ordered_json::array();
  for (const auto& a : b.audits) audits.push_back({{"task", a.task}, {"step", a.step}, {"hash", a.hash}});
  manifest["audits"] = std::move(audits);
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

MultiTaskBundle load_bundle(const std::filesystem::path& dir) {
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle manifest: ") + e.what());
  }
  MultiTaskBundle b;
  try {
    b.selector = manifest.at("selector").get<std::string>();
    b.coefficient = manifest.at("coefficient").get<double>();
    b.finetune_steps = manifest.at("finetune_steps").get<int64_t>();
    b.provenance = manifest.at("provenance");
    const Checkpoint shared = load_checkpoint(dir / manifest.at("shared").at("file").get<std::string>());
    b.shared = shared.params;
    b.shared_hash = b.shared.content_hash();
    if (b.shared_hash != manifest.at("shared").at("content_hash").get<std::string>())
      throw FormatError("bundle shared tree hash does not match its manifest");
    for (const auto& t : manifest.at("tasks")) {
      const Checkpoint c = load_checkpoint(dir / t.at("file").get<std::string>());
      if (c.params.content_hash() != t.at("content_hash").get<std::string>())
        throw FormatError("bundle task " + t.at("file").get<std::string>() + " hash does not match its manifest");
      DTModel m = to_model(c);
      ParameterTree full;
      for (const auto& name : c.provenance.at("tree_order")) {
        const std::string n = name.get<std::string>();
        const ParameterTree& from = b.shared.contains(n) ? b.shared : c.params;
        full.add(n, from.at(n), from.frozen(n));
      }
      m.params = std::move(full);
      b.tasks.push_back(std::move(m));
    }
    for (const auto& a : manifest.at("audits"))
      b.audits.push_back({a.at("task").get<int64_t>(), a.at("step").get<int64_t>(), a.at("hash").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle manifest: ") + e.what());
  }
  return b;
}

DTModel frozen_transfer(const DTModel& source, const OfflineDataset& target, const DTModel* target_init,
                        int64_t finetune_steps, const TrainConfig& train) {
  const EnvBinding env = target_init ? target_init->env : EnvBinding::from_dataset(target);
  DTModel m;
  m.arch = source.arch;
  m.context_len = source.context_len;
  m.env = env;
  const ParameterTree heads =
      target_init ? target_init->params.filter([](std::string_view n) { return is_projection_param(n); })
                  : init_dt_projections(source.arch, env, derive_seed(train.seed, "projections"));
  for (const auto& e : heads.entries())
    if (e.name.rfind("dt.embed", 0) == 0) m.params.add(e.name, e.value);
  for (const auto& e : source.params.entries())
    if (is_transformer_param(e.name)) m.params.add(e.name, e.value, true);
  for (const auto& e : heads.entries())
    if (e.name.rfind("dt.embed", 0) != 0) m.params.add(e.name, e.value);
  TrainConfig tc = train;
  tc.steps = finetune_steps;
  tc.aux = nullptr;
  if (finetune_steps > 0) train_dt(m, target, tc);
  return m;
}

SizeReport transformer_size_ratio(const LayerSelector& selector, const ArchConfig& arch, int64_t n_tasks) {
  if (n_tasks < 1) throw Error("transformer_size_ratio: n_tasks must be positive");
  const ParameterTree tree = init_transformer(arch, 0);
  SizeReport r;
  r.selector = selector.name();
  r.n_tasks = n_tasks;
  r.total = tree.numel();
  r.shared = selected_count(tree, selector);
  r.unique = r.total - r.shared;
  r.f_shared = static_cast<double>(r.shared) / static_cast<double>(r.total);
  r.f_unique = static_cast<double>(r.unique) / static_cast<double>(r.total);
  r.percent = 100.0 * static_cast<double>(r.shared + n_tasks * r.unique) / static_cast<double>(r.total);
  return r;
}

std::vector<CurvePoint> init_transfer(const ParameterTree* init, const LayerSelector& copy, const ArchConfig& arch,
                                      const OfflineDataset& target, int64_t epochs, int64_t steps_per_epoch,
                                      const TrainConfig& train, uint64_t init_seed) {
  DTModel m = init_dt_model(arch, EnvBinding::from_dataset(target), init_seed);
  if (init) {
    for (const auto& e : init->entries())
      if (copy.matches(e.name) && m.params.contains(e.name)) m.params.set(e.name, e.value);
  }
  std::vector<CurvePoint> curve;
  const uint64_t eval_seed = derive_seed(train.seed, "eval");
  auto record = [&](int64_t epoch) {
    const EvalResult r = evaluate(m, train.target_multiplier, train.eval_episodes, eval_seed);
    curve.push_back({epoch, epoch * steps_per_epoch, r.mean_return, r.normalized});
  };
  record(0);
  OptimizerState opt;
  opt.config = train.adam;
  TrainConfig tc = train;
  tc.aux = nullptr;
  const uint64_t data_seed = derive_seed(train.seed, "batches");
  int64_t step = 0;
  for (int64_t ep = 1; ep <= epochs; ++ep) {
    for (int64_t i = 0; i < steps_per_epoch; ++i) {
      ++step;
      const DTBatch batch =
          sample_batch(target, tc.batch_size, m.context_len, derive_seed(data_seed, static_cast<uint64_t>(step)));
      train_step(m, batch, opt, tc, step);
    }
    record(ep);
  }
  return curve;
}

}  // namespace dtm
