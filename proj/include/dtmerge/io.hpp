#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtmerge/tensor.hpp"

namespace dtm {

// Malformed container: wrong magic, truncation, bad header, hash mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::filesystem::path& p) : Error("missing artifact: " + p.string()) {}
};

// Writes to a sibling temp file, fsyncs, then renames over the destination.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Shared framing for DTMC/DTDS: magic(4) | u16 version | u32 header length | header | payload.
struct Container {
  nlohmann::ordered_json header;
  std::string payload;
};

std::string encode_container(std::string_view magic, uint16_t version, const nlohmann::ordered_json& header,
                             std::string_view payload);
Container decode_container(std::string_view bytes, std::string_view magic, uint16_t version);

void append_f32_le(std::string& out, std::span<const float> values);
void read_f32_le(std::string_view in, size_t offset, std::span<float> out);

}  // namespace dtm
