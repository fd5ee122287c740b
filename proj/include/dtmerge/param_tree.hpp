#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dtmerge/tensor.hpp"

namespace dtm {

// Ordered name -> tensor map addressing every weight of a model. Insertion order is the
// canonical (depth) order; merges and checkpoints preserve it.
class ParameterTree {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool frozen = false;
  };

  void add(std::string name, Tensor value, bool frozen = false);
  // Replaces the value of an existing entry; the shape must match.
  void set(std::string_view name, Tensor value);
  void set_frozen(std::string_view name, bool frozen);

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  const Tensor& at(std::string_view name) const;
  bool frozen(std::string_view name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  int64_t numel() const;
  ParameterTree filter(const std::function<bool(std::string_view)>& keep) const;
  // Copies entries of other over same-named entries here (adds missing ones).
  void update_from(const ParameterTree& other);

  // SHA-256 over names, shapes and raw f32 bytes, in tree order.
  std::string content_hash() const;
  bool bit_equal(const ParameterTree& other) const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

std::string sha256_hex(const void* data, size_t size);

}  // namespace dtm
