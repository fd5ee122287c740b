#include "dtmerge/checkpoint.hpp"

#include "dtmerge/io.hpp"

namespace dtm {

using nlohmann::ordered_json;

ordered_json arch_to_json(const ArchConfig& arch) {
  ordered_json j;
  j["n_layers"] = arch.n_layers;
  j["n_heads"] = arch.n_heads;
  j["d_embed"] = arch.d_embed;
  j["context_positions"] = arch.context_positions;
  j["mlp_ratio"] = arch.mlp_ratio;
  j["activation"] = std::string(to_string(arch.activation));
  j["dropout"] = arch.dropout;
  j["attention_removed"] = arch.attention_removed;
  return j;
}

ArchConfig arch_from_json(const ordered_json& j) {
  ArchConfig a;
  a.n_layers = j.at("n_layers").get<int64_t>();
  a.n_heads = j.at("n_heads").get<int64_t>();
  a.d_embed = j.at("d_embed").get<int64_t>();
  a.context_positions = j.at("context_positions").get<int64_t>();
  a.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
  a.activation = activation_from_string(j.at("activation").get<std::string>());
  a.dropout = j.at("dropout").get<float>();
  a.attention_removed = j.at("attention_removed").get<bool>();
  a.validate();
  return a;
}

ordered_json binding_to_json(const EnvBinding& env) {
  ordered_json j;
  j["env"] = env.env;
  j["state_dim"] = env.state_dim;
  j["action_dim"] = env.action_dim;
  j["max_timestep"] = env.max_timestep;
  j["rtg_scale"] = env.rtg_scale;
  j["max_return"] = env.max_return;
  j["references"] = {{"random", env.refs.random_ref}, {"medium", env.refs.medium_ref}, {"expert", env.refs.expert_ref}};
  return j;
}

EnvBinding binding_from_json(const ordered_json& j) {
  EnvBinding b;
  b.env = j.at("env").get<std::string>();
  b.state_dim = j.at("state_dim").get<int64_t>();
  b.action_dim = j.at("action_dim").get<int64_t>();
  b.max_timestep = j.at("max_timestep").get<int64_t>();
  b.rtg_scale = j.at("rtg_scale").get<double>();
  b.max_return = j.at("max_return").get<double>();
  b.refs.random_ref = j.at("references").at("random").get<double>();
  b.refs.medium_ref = j.at("references").at("medium").get<double>();
  b.refs.expert_ref = j.at("references").at("expert").get<double>();
  return b;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  ordered_json manifest = ordered_json::object();
  for (const auto& e : ckpt.params.entries()) {
    ordered_json m;
    m["dtype"] = "f32";
    m["shape"] = e.value.shape();
    m["offset"] = payload.size();
    m["frozen"] = e.frozen;
    manifest[e.name] = std::move(m);
    append_f32_le(payload, e.value.data());
  }
  ordered_json h;
  h["arch"] = arch_to_json(ckpt.arch);
  h["context_len"] = ckpt.context_len;
  h["env"] = ckpt.env ? binding_to_json(*ckpt.env) : ordered_json(nullptr);
  h["manifest"] = std::move(manifest);
  h["provenance"] = ckpt.provenance;
  h["payload_bytes"] = payload.size();
  h["content_hash"] = sha256_hex(payload.data(), payload.size());
  return encode_container("DTMC", kCheckpointVersion, h, payload);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Container c = decode_container(bytes, "DTMC", kCheckpointVersion);
  Checkpoint ckpt;
  try {
    const ordered_json& h = c.header;
    if (h.at("payload_bytes").get<size_t>() != c.payload.size())
      throw FormatError("checkpoint payload is " + std::to_string(c.payload.size()) + " bytes, header says " +
                        std::to_string(h.at("payload_bytes").get<size_t>()));
    if (h.at("content_hash").get<std::string>() != sha256_hex(c.payload.data(), c.payload.size()))
      throw FormatError("checkpoint content hash mismatch");
    ckpt.arch = arch_from_json(h.at("arch"));
    ckpt.context_len = h.at("context_len").get<int64_t>();
    if (!h.at("env").is_null()) ckpt.env = binding_from_json(h.at("env"));
    ckpt.provenance = h.at("provenance");
    size_t expected = 0;
    for (const auto& [name, m] : h.at("manifest").items()) {
      if (m.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype for " + name);
      const size_t offset = m.at("offset").get<size_t>();
      if (offset != expected) throw FormatError("manifest offsets out of order at " + name);
      Tensor t(m.at("shape").get<Shape>());
      read_f32_le(c.payload, offset, t.mutable_data());
      expected = offset + static_cast<size_t>(t.numel()) * sizeof(float);
      ckpt.params.add(name, std::move(t), m.at("frozen").get<bool>());
    }
    if (expected != c.payload.size()) throw FormatError("checkpoint payload has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  atomic_write(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Checkpoint to_checkpoint(const DTModel& model, ordered_json provenance) {
  Checkpoint c;
  c.arch = model.arch;
  c.context_len = model.context_len;
  c.env = model.env;
  c.params = model.params;
  c.provenance = std::move(provenance);
  return c;
}

DTModel to_model(const Checkpoint& ckpt) {
  if (!ckpt.env) throw Error("checkpoint has no environment binding; it is not a DT model");
  DTModel m;
  m.arch = ckpt.arch;
  m.context_len = ckpt.context_len;
  m.env = *ckpt.env;
  m.params = ckpt.params;
  return m;
}

void save_model(const DTModel& model, const std::filesystem::path& path, ordered_json provenance) {
  save_checkpoint(to_checkpoint(model, std::move(provenance)), path);
}

DTModel load_model(const std::filesystem::path& path) { return to_model(load_checkpoint(path)); }

}  // namespace dtm
