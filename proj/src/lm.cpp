#include "dtmerge/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "dtmerge/rng.hpp"

namespace dtm {

using ad::Graph;
using ad::Var;

namespace {

constexpr std::array<const char*, 6> kDet = {"the", "a", "every", "some", "that", "one"};
constexpr std::array<const char*, 14> kAdj = {"small", "red",   "quiet", "old",    "bright", "heavy", "quick",
                                              "green", "tired", "young", "strange", "cold",  "round", "soft"};
constexpr std::array<const char*, 16> kNoun = {"cat",   "river", "robot", "garden", "teacher", "lamp",
                                               "horse", "city",  "stone", "window", "bird",    "engine",
                                               "child", "ship",  "tree",  "letter"};
constexpr std::array<const char*, 14> kVerb = {"sees",    "follows", "builds", "finds",  "carries", "watches",
                                               "moves",   "likes",   "pushes", "paints", "answers", "holds",
                                               "reaches", "opens"};
constexpr std::array<const char*, 8> kPrep = {"near", "under", "behind", "with", "above", "beside", "into", "past"};
constexpr std::array<const char*, 6> kAdv = {"slowly", "often", "never", "gladly", "again", "today"};

template <size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& words) {
  return words[rng.below(N)];
}

void noun_phrase(Rng& rng, std::string& out) {
  out += pick(rng, kDet);
  const double u = rng.uniform();
  if (u < 0.5) {
    out += ' ';
    out += pick(rng, kAdj);
    if (u < 0.12) {
      out += ' ';
      out += pick(rng, kAdj);
    }
  }
  out += ' ';
  out += pick(rng, kNoun);
}

void sentence(Rng& rng, std::string& out) {
  const size_t first = out.size();
  noun_phrase(rng, out);
  out[first] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[first])));
  if (rng.uniform() < 0.25) {
    out += ' ';
    out += pick(rng, kAdv);
  }
  out += ' ';
  out += pick(rng, kVerb);
  out += ' ';
  noun_phrase(rng, out);
  if (rng.uniform() < 0.4) {
    out += ' ';
    out += pick(rng, kPrep);
    out += ' ';
    noun_phrase(rng, out);
  }
  if (rng.uniform() < 0.15) {
    out += " and ";
    out += pick(rng, kVerb);
    out += ' ';
    out += std::to_string(2 + rng.below(9));
    out += ' ';
    out += pick(rng, kNoun);
    out += 's';
  }
  out += rng.uniform() < 0.9 ? ". " : "? ";
  if (rng.uniform() < 0.08) out += '\n';
}

}  // namespace

Corpus generate_corpus(uint64_t seed, int64_t n_chars) {
  if (n_chars <= 0) throw Error("generate_corpus: n_chars must be positive");
  Rng rng(derive_seed(seed, "corpus"));
  std::string text;
  text.reserve(static_cast<size_t>(n_chars) + 256);
  while (static_cast<int64_t>(text.size()) < n_chars) sentence(rng, text);
  text.resize(static_cast<size_t>(n_chars));
  Corpus c;
  c.seed = seed;
  c.tokens.reserve(text.size());
  for (char ch : text) c.tokens.push_back(static_cast<int32_t>(static_cast<unsigned char>(ch)));
  return c;
}

namespace {

size_t split_point(const Corpus& c, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error("corpus split fraction must lie in (0, 1)");
  return c.tokens.size() - static_cast<size_t>(static_cast<double>(c.tokens.size()) * fraction);
}

}  // namespace

std::span<const int32_t> held_out(const Corpus& c, double fraction) {
  return std::span<const int32_t>(c.tokens).subspan(split_point(c, fraction));
}

std::span<const int32_t> training_part(const Corpus& c, double fraction) {
  return std::span<const int32_t>(c.tokens).first(split_point(c, fraction));
}

double unigram_perplexity(std::span<const int32_t> train, std::span<const int32_t> eval, int32_t vocab) {
  if (eval.empty()) throw Error("unigram_perplexity: empty evaluation text");
  std::vector<double> counts(static_cast<size_t>(vocab), 1.0);
  for (int32_t t : train) counts.at(static_cast<size_t>(t)) += 1.0;
  const double total = static_cast<double>(train.size()) + vocab;
  double nll = 0.0;
  for (int32_t t : eval) nll -= std::log(counts.at(static_cast<size_t>(t)) / total);
  return std::exp(nll / static_cast<double>(eval.size()));
}

ArchConfig default_lm_arch() {
  ArchConfig a;
  a.activation = Activation::gelu;
  return a;
}

ParameterTree init_lm_head(const ArchConfig& arch, int32_t vocab, uint64_t seed) {
  const int64_t d = arch.d_embed;
  ParameterTree tree;
  auto normal = [&](const std::string& name, Shape shape) {
    Rng rng(derive_seed(seed, name));
    Tensor t(std::move(shape));
    for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, 0.02));
    tree.add(name, std::move(t));
  };
  normal("lm_head.token_embed", {vocab, d});
  normal("lm_head.pos_embed", {arch.context_positions, d});
  normal("lm_head.out.weight", {d, vocab});
  tree.add("lm_head.out.bias", Tensor::zeros({vocab}));
  return tree;
}

Checkpoint init_lm(const ArchConfig& arch, int32_t vocab, uint64_t seed) {
  Checkpoint c;
  c.arch = arch;
  c.params = init_transformer(arch, derive_seed(seed, "transformer"));
  c.params.update_from(init_lm_head(arch, vocab, derive_seed(seed, "lm_head")));
  c.provenance["kind"] = "language_model";
  c.provenance["seed"] = seed;
  c.provenance["vocab"] = vocab;
  return c;
}

LMBatch sample_lm_batch(std::span<const int32_t> tokens, int64_t batch, int64_t len, uint64_t seed) {
  if (static_cast<int64_t>(tokens.size()) < len + 1) throw Error("sample_lm_batch: text shorter than one window");
  LMBatch b;
  b.batch = batch;
  b.len = len;
  b.inputs.resize(static_cast<size_t>(batch * len));
  b.targets.resize(static_cast<size_t>(batch * len));
  Rng rng(seed);
  const uint64_t starts = tokens.size() - static_cast<size_t>(len);
  for (int64_t r = 0; r < batch; ++r) {
    const size_t s = rng.below(starts);
    for (int64_t t = 0; t < len; ++t) {
      b.inputs[static_cast<size_t>(r * len + t)] = tokens[s + static_cast<size_t>(t)];
      b.targets[static_cast<size_t>(r * len + t)] = tokens[s + static_cast<size_t>(t) + 1];
    }
  }
  return b;
}

Var lm_embed(Graph& g, const ParamVars& p, const ArchConfig& arch, const LMBatch& b) {
  if (b.len > arch.context_positions) throw Error("lm_embed: window longer than the model's positions");
  std::vector<int32_t> pos(b.inputs.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int32_t>(static_cast<int64_t>(i) % b.len);
  Var tok = g.embedding(param(p, "lm_head.token_embed"), b.inputs, {b.batch * b.len});
  Var where = g.embedding(param(p, "lm_head.pos_embed"), pos, {b.batch * b.len});
  return g.add(tok, where);
}

Var lm_loss(Graph& g, const ParamVars& p, const ArchConfig& arch, const LMBatch& b) {
  Var h = g.dropout(lm_embed(g, p, arch, b), arch.dropout);
  h = transformer_forward(g, p, arch, h, b.batch, b.len);
  Var logits = g.add(g.matmul(h, param(p, "lm_head.out.weight")), param(p, "lm_head.out.bias"));
  return g.cross_entropy(logits, b.targets);
}

Checkpoint pretrain_lm(const Corpus& corpus, const ArchConfig& arch, const LMTrainConfig& cfg, LMTrainLog* log) {
  Checkpoint ckpt = init_lm(arch, corpus.vocab, cfg.seed);
  const std::span<const int32_t> train = training_part(corpus);
  OptimizerState opt;
  opt.config = cfg.adam;
  const uint64_t batch_stream = derive_seed(cfg.seed, "lm-batches");
  const uint64_t dropout_seed = derive_seed(cfg.seed, "lm-dropout");
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    const LMBatch b = sample_lm_batch(train, cfg.batch_size, arch.context_positions,
                                      derive_seed(batch_stream, static_cast<uint64_t>(step)));
    Graph g({.training = true, .dropout_seed = dropout_seed, .step = static_cast<uint64_t>(step)});
    try {
      const ParamVars p = bind_parameters(g, ckpt.params);
      Var loss = lm_loss(g, p, arch, b);
      if (log) log->losses.push_back(g.value(loss).item());
      ad::GradientMap grads = g.backward(loss);
      clip_grad_norm(grads, cfg.grad_clip);
      optimizer_step(ckpt.params, grads, opt);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("language-model pretraining diverged at step " + std::to_string(step) + ": " + e.what());
    }
  }
  ckpt.provenance["pretrain_steps"] = cfg.steps;
  ckpt.provenance["corpus_seed"] = corpus.seed;
  ckpt.provenance["corpus_chars"] = corpus.tokens.size();
  if (log) {
    log->perplexity = lm_perplexity(ckpt.params, arch, held_out(corpus));
    log->unigram_perplexity = unigram_perplexity(train, held_out(corpus), corpus.vocab);
  }
  return ckpt;
}

double lm_perplexity(const ParameterTree& params, const ArchConfig& arch, std::span<const int32_t> tokens,
                     int64_t max_windows) {
  const int64_t len = arch.context_positions;
  const int64_t windows = std::min<int64_t>(max_windows, (static_cast<int64_t>(tokens.size()) - 1) / len);
  if (windows <= 0) throw Error("lm_perplexity: text shorter than one window");
  LMBatch b;
  b.batch = windows;
  b.len = len;
  for (int64_t w = 0; w < windows; ++w) {
    for (int64_t t = 0; t < len; ++t) {
      b.inputs.push_back(tokens[static_cast<size_t>(w * len + t)]);
      b.targets.push_back(tokens[static_cast<size_t>(w * len + t + 1)]);
    }
  }
  Graph g({.training = false});
  const ParamVars p = bind_parameters(g, params, [](std::string_view) { return false; });
  return std::exp(static_cast<double>(g.value(lm_loss(g, p, arch, b)).item()));
}

KMeansResult kmeans(const Tensor& points, int64_t k, uint64_t seed, int64_t max_iters) {
  if (points.rank() != 2) throw ShapeError("kmeans: points must be 2-D, got " + shape_str(points.shape()));
  const int64_t n = points.dim(0), d = points.dim(1);
  if (k <= 0 || k > n) throw Error("kmeans: k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
  auto row = [&](int64_t i) { return points.ptr() + i * d; };

  // Seeded choice of k distinct starting points (partial Fisher-Yates).
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, "kmeans"));
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - i)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  std::vector<double> centers(static_cast<size_t>(k * d));
  for (int64_t c = 0; c < k; ++c)
    for (int64_t j = 0; j < d; ++j) centers[static_cast<size_t>(c * d + j)] = row(order[static_cast<size_t>(c)])[j];

  auto dist2 = [&](int64_t i, int64_t c) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double e = row(i)[j] - centers[static_cast<size_t>(c * d + j)];
      s += e * e;
    }
    return s;
  };
  // Nearest center per point, lowest index on ties.
  auto assign = [&](std::vector<int32_t>& a, std::vector<double>& best) {
    for (int64_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      int32_t bc = 0;
      for (int64_t c = 0; c < k; ++c) {
        const double v = dist2(i, c);
        if (v < bd) {
          bd = v;
          bc = static_cast<int32_t>(c);
        }
      }
      a[static_cast<size_t>(i)] = bc;
      best[static_cast<size_t>(i)] = bd;
    }
  };

  KMeansResult res;
  res.assignment.assign(static_cast<size_t>(n), -1);
  std::vector<int32_t> a(static_cast<size_t>(n));
  std::vector<double> best(static_cast<size_t>(n));
  for (int64_t it = 0; it < max_iters; ++it) {
    assign(a, best);
    const bool changed = a != res.assignment;
    res.assignment = a;
    // Update step: centers become the means of their members.
    std::vector<double> sums(static_cast<size_t>(k * d), 0.0);
    std::vector<int64_t> count(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < n; ++i) {
      const int32_t c = a[static_cast<size_t>(i)];
      ++count[static_cast<size_t>(c)];
      for (int64_t j = 0; j < d; ++j) sums[static_cast<size_t>(c * d + j)] += row(i)[j];
    }
    for (int64_t c = 0; c < k; ++c) {
      if (count[static_cast<size_t>(c)] == 0) continue;
      for (int64_t j = 0; j < d; ++j)
        centers[static_cast<size_t>(c * d + j)] = sums[static_cast<size_t>(c * d + j)] / static_cast<double>(count[static_cast<size_t>(c)]);
    }
    // Empty clusters move onto the point currently farthest from its nearest center.
    for (int64_t c = 0; c < k; ++c) {
      if (count[static_cast<size_t>(c)] != 0) continue;
      std::vector<int32_t> tmp(static_cast<size_t>(n));
      assign(tmp, best);
      const int64_t far = std::max_element(best.begin(), best.end()) - best.begin();
      for (int64_t j = 0; j < d; ++j) centers[static_cast<size_t>(c * d + j)] = row(far)[j];
      count[static_cast<size_t>(c)] = 1;
    }
    std::vector<int32_t> tmp(static_cast<size_t>(n));
    assign(tmp, best);
    double obj = 0.0;
    for (double v : best) obj += v;
    res.objective.push_back(obj);
    res.iterations = it + 1;
    if (!changed) break;
  }
  res.centers = Tensor({k, d});
  for (int64_t i = 0; i < k * d; ++i) res.centers[i] = static_cast<float>(centers[static_cast<size_t>(i)]);
  return res;
}

KMeansResult cluster_token_embeddings(const ParameterTree& lm_params, int64_t k, uint64_t seed) {
  if (!lm_params.contains("lm_head.token_embed")) throw Error("cluster_token_embeddings: no lm_head.token_embed entry");
  return kmeans(lm_params.at("lm_head.token_embed"), k, seed);
}

double lambda1_at(const CoTrainConfig& cfg, int64_t step) {
  if (cfg.lambda1_decay_steps <= 0 || step >= cfg.lambda1_decay_steps) return 0.0;
  const double frac = static_cast<double>(std::max<int64_t>(step, 0)) / static_cast<double>(cfg.lambda1_decay_steps);
  return cfg.lambda1_init * (1.0 - frac);
}

Var cotrain_aux(Graph& g, const ParamVars& p, const DTModel& model, const DTForward& fwd, const LMBatch& lm_batch,
                const Tensor& centers, const CoTrainConfig& cfg, int64_t step, CoTrainLosses* out) {
  const double l1 = lambda1_at(cfg, step);
  Var total = g.input(Tensor::scalar(0.0f));
  CoTrainLosses losses;
  if (l1 != 0.0) {
    Var cos = g.max_cosine_distance(fwd.token_embeddings, centers);
    losses.cos = g.value(cos).item();
    total = g.scale(cos, static_cast<float>(l1));
  }
  if (cfg.lambda2 != 0.0) {
    Var lm = lm_loss(g, p, model.arch, lm_batch);
    losses.lm = g.value(lm).item();
    Var term = cfg.lambda2 == 1.0 ? lm : g.scale(lm, static_cast<float>(cfg.lambda2));
    total = l1 != 0.0 ? g.add(total, term) : term;
  }
  if (out) *out = losses;
  return total;
}

CoTrainLosses cotrain_step(DTModel& model, const DTBatch& dt_batch, const LMBatch& lm_batch, const Tensor& centers,
                           const CoTrainConfig& cfg, int64_t step, OptimizerState& opt, const TrainConfig& train_cfg) {
  CoTrainLosses losses;
  TrainConfig tc = train_cfg;
  tc.aux = [&](Graph& g, const ParamVars& p, const DTForward& f, int64_t s) {
    return cotrain_aux(g, p, model, f, lm_batch, centers, cfg, s, &losses);
  };
  losses.total = train_step(model, dt_batch, opt, tc, step, &losses.mse);
  return losses;
}

AuxObjective make_cotrain_objective(std::shared_ptr<const std::vector<int32_t>> tokens, Tensor centers,
                                    CoTrainConfig cfg, const DTModel& model, uint64_t seed,
                                    std::shared_ptr<std::vector<CoTrainLosses>> history) {
  DTModel shape_only;
  shape_only.arch = model.arch;
  const uint64_t stream = derive_seed(seed, "cotrain-lm-batches");
  return [tokens = std::move(tokens), centers = std::move(centers), cfg, shape_only = std::move(shape_only), stream,
          history](Graph& g, const ParamVars& p, const DTForward& f, int64_t step) {
    const LMBatch b = sample_lm_batch(*tokens, cfg.lm_batch, shape_only.arch.context_positions,
                                      derive_seed(stream, static_cast<uint64_t>(step)));
    CoTrainLosses l;
    Var v = cotrain_aux(g, p, shape_only, f, b, centers, cfg, step, &l);
    if (history) history->push_back(l);
    return v;
  };
}

DTModel dt_from_lm(const Checkpoint& lm, const EnvBinding& env, uint64_t projection_seed, int64_t context_len) {
  if (3 * context_len > lm.arch.context_positions)
    throw Error("dt_from_lm: context length " + std::to_string(context_len) + " needs more positions than the LM has");
  DTModel m;
  m.arch = lm.arch;
  m.context_len = context_len;
  m.env = env;
  m.params = init_dt_projections(lm.arch, env, projection_seed);
  const ParameterTree transformer = lm.params.filter([](std::string_view n) { return is_transformer_param(n); });
  // Transformer first, then the DT heads, then the LM head: the canonical order.
  ParameterTree ordered;
  for (const auto& e : m.params.entries())
    if (e.name.rfind("dt.embed", 0) == 0) ordered.add(e.name, e.value);
  for (const auto& e : transformer.entries()) ordered.add(e.name, e.value);
  for (const auto& e : m.params.entries())
    if (e.name.rfind("dt.embed", 0) != 0) ordered.add(e.name, e.value);
  for (const auto& e : lm.params.entries())
    if (e.name.rfind("lm_head.", 0) == 0) ordered.add(e.name, e.value);
  m.params = std::move(ordered);
  return m;
}

std::string lm_init_hash(const Checkpoint& lm) { return transformer_part(lm.params).content_hash(); }

Corpus corpus_of(const Checkpoint& lm) {
  const auto& pv = lm.provenance;
  if (!pv.contains("corpus_seed") || !pv.contains("corpus_chars"))
    throw Error("language-model checkpoint does not record its corpus");
  return generate_corpus(pv.at("corpus_seed").get<uint64_t>(), pv.at("corpus_chars").get<int64_t>());
}

DTModel cotrain_dt(const Checkpoint& lm, const OfflineDataset& ds, const TrainConfig& train, const CoTrainConfig& co,
                   TrainLog* log, std::vector<CoTrainLosses>* losses) {
  const Corpus corpus = corpus_of(lm);
  auto tokens = std::make_shared<const std::vector<int32_t>>(training_part(corpus).begin(), training_part(corpus).end());
  const KMeansResult km = cluster_token_embeddings(lm.params, co.n_clusters, derive_seed(train.seed, "kmeans"));
  DTModel m = dt_from_lm(lm, EnvBinding::from_dataset(ds), derive_seed(train.seed, "projections"));
  auto history = losses ? std::make_shared<std::vector<CoTrainLosses>>() : nullptr;
  TrainConfig tc = train;
  tc.aux = make_cotrain_objective(tokens, km.centers, co, m, train.seed, history);
  TrainLog l = train_dt(m, ds, tc);
  if (log) *log = std::move(l);
  if (losses) *losses = *history;
  return m;
}

}  // namespace dtm
