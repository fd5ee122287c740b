#include "dtmerge/param_tree.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <memory>

namespace dtm {

namespace {

struct DigestDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

std::string to_hex(const unsigned char* bytes, unsigned len) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[bytes[i] >> 4]);
    out.push_back(kHex[bytes[i] & 15]);
  }
  return out;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  void update(const void* data, size_t size) {
    if (size && EVP_DigestUpdate(ctx_.get(), data, size) != 1) throw Error("sha256: update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw Error("sha256: final failed");
    return to_hex(md, len);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

}  // namespace

std::string sha256_hex(const void* data, size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

void ParameterTree::add(std::string name, Tensor value, bool frozen) {
  if (index_.count(name)) throw Error("parameter tree: duplicate name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(value), frozen});
}

void ParameterTree::set(std::string_view name, Tensor value) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("parameter tree: unknown parameter '" + std::string(name) + "'");
  Entry& e = entries_[it->second];
  if (e.value.shape() != value.shape()) throw ShapeError("set " + e.name, e.value.shape(), value.shape());
  e.value = std::move(value);
}

void ParameterTree::set_frozen(std::string_view name, bool frozen) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("parameter tree: unknown parameter '" + std::string(name) + "'");
  entries_[it->second].frozen = frozen;
}

const Tensor& ParameterTree::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("parameter tree: unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].value;
}

bool ParameterTree::frozen(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("parameter tree: unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].frozen;
}

std::vector<std::string> ParameterTree::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(e.name);
  return out;
}

int64_t ParameterTree::numel() const {
  int64_t n = 0;
  for (const Entry& e : entries_) n += e.value.numel();
  return n;
}

ParameterTree ParameterTree::filter(const std::function<bool(std::string_view)>& keep) const {
  ParameterTree out;
  for (const Entry& e : entries_)
    if (keep(e.name)) out.add(e.name, e.value, e.frozen);
  return out;
}

void ParameterTree::update_from(const ParameterTree& other) {
  for (const Entry& e : other.entries_) {
    if (contains(e.name)) {
      set(e.name, e.value);
      set_frozen(e.name, e.frozen);
    } else {
      add(e.name, e.value, e.frozen);
    }
  }
}

std::string ParameterTree::content_hash() const {
  Sha256 h;
  for (const Entry& e : entries_) {
    h.update(e.name.data(), e.name.size() + 1);  // include the terminator as a separator
    for (int64_t d : e.value.shape()) h.update(&d, sizeof d);
    h.update(e.value.ptr(), static_cast<size_t>(e.value.numel()) * sizeof(float));
  }
  return h.hex();
}

bool ParameterTree::bit_equal(const ParameterTree& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (!entries_[i].value.bit_equal(other.entries_[i].value)) return false;
  }
  return true;
}

}  // namespace dtm
