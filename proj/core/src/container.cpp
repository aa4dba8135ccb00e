#include "seld/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace seld {

namespace {

constexpr const char* kMagic = "SELDPACK 1";

void check_token(const std::string& s, const char* what) {
  if (s.empty()) throw std::invalid_argument(std::string("container: empty ") + what);
  for (char c : s) {
    if (c == '\n' || c == '\r') throw std::invalid_argument(std::string("container: newline in ") + what);
  }
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

void Container::put(const std::string& name, Tensor t) {
  check_token(name, "tensor name");
  if (name.find(' ') != std::string::npos) throw std::invalid_argument("container: space in tensor name " + name);
  auto it = index_.find(name);
  if (it != index_.end()) {
    tensors_[it->second].second = std::move(t);
    return;
  }
  index_[name] = tensors_.size();
  tensors_.emplace_back(name, std::move(t));
}

bool Container::has(const std::string& name) const { return index_.count(name) > 0; }

const Tensor& Container::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("container has no tensor '" + name + "'");
  return tensors_[it->second].second;
}

void Container::set_meta(const std::string& key, const std::string& value) {
  check_token(key, "meta key");
  if (key.find('=') != std::string::npos || key.find(' ') != std::string::npos) {
    throw std::invalid_argument("container: invalid meta key " + key);
  }
  for (char c : value) {
    if (c == '\n' || c == '\r') throw std::invalid_argument("container: newline in meta value for " + key);
  }
  meta_[key] = value;
}

const std::string& Container::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw std::out_of_range("container has no meta key '" + key + "'");
  return it->second;
}

std::string Container::manifest() const {
  std::ostringstream os;
  os << kMagic << "\n";
  for (const auto& [k, v] : meta_) os << "meta " << k << "=" << v << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    os << "tensor " << name << " f64 " << t.rank();
    for (auto d : t.shape()) os << " " << d;
    const std::size_t bytes = t.size() * sizeof(double);
    os << " " << offset << " " << bytes << "\n";
    offset += bytes;
  }
  os << "end\n";
  return os.str();
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string head = c.manifest();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  std::vector<char> buf;
  for (const auto& [name, t] : c.tensors()) {
    buf.resize(t.size() * sizeof(double));
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(t[i]));
      std::memcpy(buf.data() + i * 8, &bits, 8);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw std::runtime_error(path.string() + ": not a tensor container (bad magic)");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, bytes;
  };
  std::vector<Entry> entries;
  Container c;
  std::size_t lineno = 1;
  bool ended = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line == "end") {
      ended = true;
      break;
    }
    auto fail = [&](const std::string& why) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
    };
    if (line.rfind("meta ", 0) == 0) {
      auto eq = line.find('=');
      if (eq == std::string::npos) fail("meta line without '='");
      c.set_meta(line.substr(5, eq - 5), line.substr(eq + 1));
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      Entry e;
      std::string dtype;
      std::size_t rank = 0;
      if (!(ls >> e.name >> dtype >> rank)) fail("malformed tensor line");
      if (dtype != "f64") fail("unsupported dtype " + dtype);
      e.shape.resize(rank);
      for (auto& d : e.shape) {
        if (!(ls >> d)) fail("malformed tensor shape");
      }
      if (!(ls >> e.offset >> e.bytes)) fail("malformed tensor offsets");
      if (e.bytes != shape_numel(e.shape) * sizeof(double)) fail("byte count does not match shape");
      entries.push_back(std::move(e));
    } else {
      fail("unrecognized manifest line");
    }
  }
  if (!ended) throw std::runtime_error(path.string() + ": truncated manifest");
  const auto payload_start = in.tellg();
  std::vector<char> buf;
  for (const auto& e : entries) {
    in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
    buf.resize(e.bytes);
    in.read(buf.data(), static_cast<std::streamsize>(e.bytes));
    if (!in) throw std::runtime_error(path.string() + ": truncated payload for " + e.name);
    std::vector<double> data(e.bytes / 8);
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, buf.data() + i * 8, 8);
      data[i] = std::bit_cast<double>(to_le(bits));
    }
    c.put(e.name, Tensor(e.shape, std::move(data)));
  }
  return c;
}

}  // namespace seld
