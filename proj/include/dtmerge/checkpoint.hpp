#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "dtmerge/dt_policy.hpp"
#include "dtmerge/param_tree.hpp"
#include "dtmerge/transformer.hpp"

namespace dtm {

inline constexpr uint16_t kCheckpointVersion = 1;

// DTMC file contents. `env` is absent for checkpoints that carry no DT heads (for
// example a pretrained language model).
struct Checkpoint {
  ArchConfig arch;
  int64_t context_len = 20;
  std::optional<EnvBinding> env;
  ParameterTree params;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();
};

nlohmann::ordered_json arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json binding_to_json(const EnvBinding& env);
EnvBinding binding_from_json(const nlohmann::ordered_json& j);

std::string encode_checkpoint(const Checkpoint& ckpt);
// Validates magic, version, manifest layout and the payload hash.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const DTModel& model, nlohmann::ordered_json provenance = nlohmann::ordered_json::object());
DTModel to_model(const Checkpoint& ckpt);

void save_model(const DTModel& model, const std::filesystem::path& path,
                nlohmann::ordered_json provenance = nlohmann::ordered_json::object());
DTModel load_model(const std::filesystem::path& path);

}  // namespace dtm
