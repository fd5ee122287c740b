#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dtmerge/checkpoint.hpp"
#include "dtmerge/dt_policy.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

// Character-level text; token id = ASCII code.
struct Corpus {
  std::vector<int32_t> tokens;
  int32_t vocab = 128;
  uint64_t seed = 0;
};

// Sentences from a seeded probabilistic grammar, about n_chars characters long.
Corpus generate_corpus(uint64_t seed, int64_t n_chars = 1'000'000);
// Last `fraction` of the tokens, kept out of training for perplexity.
std::span<const int32_t> held_out(const Corpus& c, double fraction = 0.05);
std::span<const int32_t> training_part(const Corpus& c, double fraction = 0.05);

// Perplexity of the add-one smoothed unigram model counted on `train`, measured on `eval`.
double unigram_perplexity(std::span<const int32_t> train, std::span<const int32_t> eval, int32_t vocab);

// The language model shares the transformer tree with the DT and adds:
//   lm_head.token_embed [vocab, d], lm_head.pos_embed [positions, d],
//   lm_head.out.weight [d, vocab], lm_head.out.bias [vocab]
ArchConfig default_lm_arch();
ParameterTree init_lm_head(const ArchConfig& arch, int32_t vocab, uint64_t seed);
Checkpoint init_lm(const ArchConfig& arch, int32_t vocab, uint64_t seed);

struct LMBatch {
  int64_t batch = 0;
  int64_t len = 0;
  std::vector<int32_t> inputs;   // [B x T]
  std::vector<int32_t> targets;  // [B x T], inputs shifted by one
};

LMBatch sample_lm_batch(std::span<const int32_t> tokens, int64_t batch, int64_t len, uint64_t seed);

// Token embeddings [B*T, d] (token + position), before the transformer.
ad::Var lm_embed(ad::Graph& g, const ParamVars& p, const ArchConfig& arch, const LMBatch& b);
// Mean next-token cross entropy of the batch.
ad::Var lm_loss(ad::Graph& g, const ParamVars& p, const ArchConfig& arch, const LMBatch& b);

struct LMTrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 32;
  AdamConfig adam{.lr = 5e-4};
  double grad_clip = 1.0;
  uint64_t seed = 0;
};

struct LMTrainLog {
  std::vector<float> losses;
  double perplexity = 0.0;  // on the held-out part
  double unigram_perplexity = 0.0;
};

// Trains the arch's transformer plus the LM head from the seeded initialization.
Checkpoint pretrain_lm(const Corpus& corpus, const ArchConfig& arch, const LMTrainConfig& cfg,
                       LMTrainLog* log = nullptr);
// exp(mean cross entropy) over non-overlapping windows of `tokens`.
double lm_perplexity(const ParameterTree& params, const ArchConfig& arch, std::span<const int32_t> tokens,
                     int64_t max_windows = 64);

struct KMeansResult {
  Tensor centers;                   // [k, d]
  std::vector<int32_t> assignment;  // per point
  std::vector<double> objective;    // sum of squared distances after each iteration
  int64_t iterations = 0;
};

// Deterministic seeded k-means. An empty cluster is reseeded at the point farthest from
// its nearest center.
KMeansResult kmeans(const Tensor& points, int64_t k, uint64_t seed, int64_t max_iters = 100);
KMeansResult cluster_token_embeddings(const ParameterTree& lm_params, int64_t k, uint64_t seed = 0);

struct CoTrainConfig {
  double lambda1_init = 0.1;
  int64_t lambda1_decay_steps = 5000;
  double lambda2 = 1.0;
  int64_t n_clusters = 32;
  int64_t lm_batch = 16;
};

// Linear decay from lambda1_init at step 0 to 0 at lambda1_decay_steps, 0 afterwards.
double lambda1_at(const CoTrainConfig& cfg, int64_t step);

struct CoTrainLosses {
  float total = 0.0f;
  float mse = 0.0f;
  float cos = 0.0f;
  float lm = 0.0f;
};

// lambda1(step) * L_cos + lambda2 * L_LM for the given graph. L_cos is the mean over the
// DT's input token embeddings of 1 - max cosine similarity to a center; it is skipped
// entirely once lambda1 is 0. Component values land in `out`.
ad::Var cotrain_aux(ad::Graph& g, const ParamVars& p, const DTModel& model, const DTForward& fwd,
                    const LMBatch& lm_batch, const Tensor& centers, const CoTrainConfig& cfg, int64_t step,
                    CoTrainLosses* out);

// One optimizer step on L_MSE + lambda1 * L_cos + lambda2 * L_LM.
CoTrainLosses cotrain_step(DTModel& model, const DTBatch& dt_batch, const LMBatch& lm_batch, const Tensor& centers,
                           const CoTrainConfig& cfg, int64_t step, OptimizerState& opt, const TrainConfig& train_cfg);

// Aux objective for train_dt: fresh LM batches per step from `tokens`.
AuxObjective make_cotrain_objective(std::shared_ptr<const std::vector<int32_t>> tokens, Tensor centers,
                                    CoTrainConfig cfg, const DTModel& model, uint64_t seed,
                                    std::shared_ptr<std::vector<CoTrainLosses>> history = nullptr);

// DT model whose transformer (and LM head) come from a pretrained LM checkpoint.
DTModel dt_from_lm(const Checkpoint& lm, const EnvBinding& env, uint64_t projection_seed, int64_t context_len = 20);

// Hash identifying the transformer a co-trained DT started from.
std::string lm_init_hash(const Checkpoint& lm);
// The corpus an LM checkpoint was pretrained on, regenerated from its provenance.
Corpus corpus_of(const Checkpoint& lm);

// Initializes a DT from the LM and trains it on the dataset with the co-training objective.
// The result's provenance-relevant hash is lm_init_hash(lm).
DTModel cotrain_dt(const Checkpoint& lm, const OfflineDataset& ds, const TrainConfig& train, const CoTrainConfig& co,
                   TrainLog* log = nullptr, std::vector<CoTrainLosses>* losses = nullptr);

}  // namespace dtm
