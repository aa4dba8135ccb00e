#pragma once

// Tensor container used for checkpoints and feature caches.
//
// Layout: a text manifest terminated by a line "end", then the raw
// little-endian float64 payload. Manifest lines:
//
//   SELDPACK 1
//   meta <key>=<value>
//   tensor <name> f64 <rank> <d0> ... <byte offset> <byte count>
//   end
//
// Offsets are relative to the first payload byte.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "seld/tensor.hpp"

namespace seld {

class Container {
 public:
  void put(const std::string& name, Tensor t);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;

  void set_meta(const std::string& key, const std::string& value);
  bool has_meta(const std::string& key) const { return meta_.count(key) > 0; }
  const std::string& meta(const std::string& key) const;
  const std::map<std::string, std::string>& all_meta() const { return meta_; }

  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  /// Manifest text (without payload), as written to disk.
  std::string manifest() const;

 private:
  std::map<std::string, std::string> meta_;
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::size_t> index_;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace seld
