#include "dtmerge/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dtm {

static_assert(std::endian::native == std::endian::little, "f32 payloads are written in native little-endian order");

void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error("cannot open " + tmp.string() + " for writing");
  size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      std::filesystem::remove(tmp);
      throw Error("write failed for " + tmp.string());
    }
    done += static_cast<size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    std::filesystem::remove(tmp);
    throw Error("fsync/close failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("rename to " + path.string() + " failed: " + ec.message());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string encode_container(std::string_view magic, uint16_t version, const nlohmann::ordered_json& header,
                             std::string_view payload) {
  const std::string h = header.dump();
  std::string out;
  out.reserve(10 + h.size() + payload.size());
  out.append(magic);
  out.push_back(static_cast<char>(version & 0xff));
  out.push_back(static_cast<char>(version >> 8));
  const auto len = static_cast<uint32_t>(h.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out.append(h);
  out.append(payload);
  return out;
}

Container decode_container(std::string_view bytes, std::string_view magic, uint16_t version) {
  if (bytes.size() < magic.size() + 6 || bytes.substr(0, magic.size()) != magic)
    throw FormatError("bad magic: expected " + std::string(magic));
  auto u8 = [&](size_t i) { return static_cast<uint32_t>(static_cast<unsigned char>(bytes[i])); };
  const size_t m = magic.size();
  const uint16_t got = static_cast<uint16_t>(u8(m) | (u8(m + 1) << 8));
  if (got != version)
    throw VersionError("unsupported " + std::string(magic) + " version " + std::to_string(got) + " (expected " +
                       std::to_string(version) + ")");
  const uint32_t len = u8(m + 2) | (u8(m + 3) << 8) | (u8(m + 4) << 16) | (u8(m + 5) << 24);
  const size_t start = m + 6;
  if (bytes.size() < start + len) throw FormatError("truncated " + std::string(magic) + " header");
  Container c;
  try {
    c.header = nlohmann::ordered_json::parse(bytes.substr(start, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  c.payload = std::string(bytes.substr(start + len));
  return c;
}

void append_f32_le(std::string& out, std::span<const float> values) {
  const size_t n = values.size() * sizeof(float);
  const size_t old = out.size();
  out.resize(old + n);
  if (n) std::memcpy(out.data() + old, values.data(), n);
}

void read_f32_le(std::string_view in, size_t offset, std::span<float> out) {
  const size_t n = out.size() * sizeof(float);
  if (offset + n > in.size()) throw FormatError("truncated payload");
  if (n) std::memcpy(out.data(), in.data() + offset, n);
}

}  // namespace dtm
