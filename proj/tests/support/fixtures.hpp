#pragma once

// Small models and datasets that keep unit tests fast.

#include <filesystem>
#include <string>

#include "dtmerge/dt_policy.hpp"
#include "dtmerge/env.hpp"

namespace fixture {

inline dtm::ArchConfig tiny_arch(dtm::Activation act = dtm::Activation::relu) {
  dtm::ArchConfig a;
  a.n_layers = 3;
  a.n_heads = 2;
  a.d_embed = 8;
  a.context_positions = 12;
  a.activation = act;
  a.dropout = 0.1f;
  return a;
}

inline constexpr int64_t kTinyK = 4;

inline dtm::OfflineDataset tiny_dataset(dtm::EnvId env, uint64_t seed = 1, int64_t n = 4) {
  return dtm::generate_dataset(dtm::env_spec(env), dtm::DatasetQuality::expert, n, seed);
}

inline dtm::DTModel tiny_model(const dtm::OfflineDataset& ds, uint64_t seed,
                               dtm::Activation act = dtm::Activation::relu) {
  return dtm::init_dt_model(tiny_arch(act), dtm::EnvBinding::from_dataset(ds), seed, kTinyK);
}

inline dtm::TrainConfig tiny_train(int64_t steps, uint64_t seed = 0) {
  dtm::TrainConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.adam.lr = 1e-3;
  c.adam.warmup_steps = 2;
  c.seed = seed;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("dtmerge_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace fixture
