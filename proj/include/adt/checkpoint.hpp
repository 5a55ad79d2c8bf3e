#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "adt/optim.hpp"

namespace adt {

// Flat versioned parameter file:
//   "ADTCKPT\0" | u32 version | u64 count |
//   count x { u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[numel] }
// All integers and doubles little-endian.
namespace checkpoint {

inline constexpr char kMagic[8] = {'A', 'D', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void write(std::ostream& os, const ParameterList& params) {
  os.write(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint64_t>(os, params.size());
  for (const auto& p : params) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::put<std::uint64_t>(os, d);
    for (double v : p.tensor.data()) detail::put<double>(os, v);
  }
}

struct Entry {
  Shape shape;
  std::vector<double> values;
};

inline std::map<std::string, Entry> read(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint64_t>(is);
  std::map<std::string, Entry> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated name");
    Entry e;
    const auto rank = detail::get<std::uint32_t>(is);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(detail::get<std::uint64_t>(is));
    e.values.resize(numel(e.shape));
    for (double& v : e.values) v = detail::get<double>(is);
    if (!out.emplace(name, std::move(e)).second) throw FormatError("checkpoint: duplicate parameter " + name);
  }
  return out;
}

// Copies stored values into `params`; names and shapes must match exactly.
inline void load_into(std::istream& is, ParameterList& params) {
  auto entries = read(is);
  if (entries.size() != params.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " parameters, file has " +
                      std::to_string(entries.size()));
  }
  for (auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw FormatError("checkpoint: missing parameter " + p.name);
    if (it->second.shape != p.tensor.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + p.name + ": " + to_string(it->second.shape) + " vs " +
                        to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

inline void save_file(const std::string& path, const ParameterList& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write(os, params);
}

inline void load_file(const std::string& path, ParameterList& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  load_into(is, params);
}

// FNV-1a over names, shapes and raw bytes; used for provenance checks.
inline std::uint64_t hash(const ParameterList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    feed(p.name.data(), p.name.size());
    for (std::size_t d : p.tensor.shape()) feed(&d, sizeof(d));
    feed(p.tensor.data().data(), p.tensor.size() * sizeof(double));
  }
  return h;
}

}  // namespace checkpoint
}  // namespace adt
